"""Frozen-encoder evaluation: linear probe and cosine kNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feataug import autodiff as ad
from feataug.checkpoint import Checkpoint
from feataug.config import ProbeSection, parse_config
from feataug.datasets import Dataset
from feataug.networks import MlpSpec, Network, init_params, spec_from_dict
from feataug.train import encoder_input


def encoder_from_checkpoint(ckpt: Checkpoint, part: str = "encoder") -> Network:
    spec = spec_from_dict(ckpt.descriptors["networks"][part])
    state = init_params(spec, 0)
    for k in state.params:
        state.params[k] = ad.Tensor(ckpt.tensors[f"param/{part}.{k}"], False)
    for k, s in state.bn_state.items():
        s.running_mean = ckpt.tensors[f"bn/{part}.{k}.running_mean"]
        s.running_var = ckpt.tensors[f"bn/{part}.{k}.running_var"]
    return Network(spec, state)


def _as_encoder(source) -> Network:
    return encoder_from_checkpoint(source) if isinstance(source, Checkpoint) else source


def check_compatible(encoder: Network, dataset: Dataset) -> None:
    """Raise ``ValueError`` when the encoder cannot read the dataset rows."""
    spec, x = encoder.spec, dataset.x_train
    if isinstance(spec, MlpSpec):
        ok = dataset.kind == "vector" and x.shape[1:] == (spec.in_dim,)
        want = f"vectors of length {spec.in_dim}"
    else:
        ok = dataset.kind == "image" and x.shape[1:] == (spec.in_channels, spec.image_size, spec.image_size)
        want = f"{spec.in_channels}x{spec.image_size}x{spec.image_size} images"
    if not ok:
        raise ValueError(f"encoder expects {want}, dataset rows have shape {x.shape[1:]}")


def encode(encoder: Network, dataset: Dataset, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode features; the encoder is read, never updated."""
    chunks = []
    for i in range(0, len(x), batch_size):
        inp = encoder_input(dataset, x[i : i + batch_size])
        chunks.append(encoder(ad.constant(inp), "eval").data)
    return np.concatenate(chunks)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float


def train_linear_classifier(
    feats: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeSection
) -> tuple[np.ndarray, np.ndarray]:
    """SGD with momentum on softmax cross-entropy; lr x0.1 at each milestone epoch."""
    rng = np.random.default_rng(cfg.seed)
    d = feats.shape[1]
    W = ad.Tensor(np.zeros((d, n_classes)), True)
    b = ad.Tensor(np.zeros(n_classes), True)
    vel = {"W": np.zeros_like(W.data), "b": np.zeros_like(b.data)}
    n = len(feats)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.1 ** sum(epoch >= m for m in cfg.milestones)
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            logits = ad.add(ad.matmul(ad.constant(feats[idx]), W), b)
            loss = ad.cross_entropy(logits, labels[idx])
            g = ad.backward(loss, {"W": W, "b": b})
            new = {}
            for name, t in (("W", W), ("b", b)):
                step = g[name] + (cfg.weight_decay * t.data if name == "W" and cfg.weight_decay else 0)
                vel[name] = cfg.momentum * vel[name] + step
                new[name] = ad.Tensor(t.data - lr * vel[name], True)
            W, b = new["W"], new["b"]
    return W.data, b.data


def linear_probe(source, dataset: Dataset, probe_cfg: ProbeSection | None = None) -> ProbeResult:
    """Top-1 test accuracy of a linear layer trained on frozen encoder features."""
    cfg = probe_cfg or ProbeSection()
    enc = _as_encoder(source)
    check_compatible(enc, dataset)
    with ad.precision("float64"):
        ftr = encode(enc, dataset, dataset.x_train).astype(np.float64)
        fte = encode(enc, dataset, dataset.x_test).astype(np.float64)
        if cfg.standardize:
            mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-6
            ftr, fte = (ftr - mu) / sd, (fte - mu) / sd
        W, b = train_linear_classifier(ftr, dataset.y_train, dataset.n_classes, cfg)
    acc = float(np.mean(np.argmax(fte @ W + b, axis=1) == dataset.y_test))
    tr_acc = float(np.mean(np.argmax(ftr @ W + b, axis=1) == dataset.y_train))
    return ProbeResult(acc, tr_acc)


def knn_predict(train_feats, train_labels, test_feats, k: int, n_classes: int) -> np.ndarray:
    """Majority vote among the ``k`` most cosine-similar training rows.

    Ties in similarity go to the lower training index; vote ties go to the
    smaller label.
    """
    if k < 1 or k > len(train_feats):
        raise ValueError(f"k must lie in [1, {len(train_feats)}]")

    def unit(x):
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    sims = unit(test_feats) @ unit(train_feats).T
    nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(test_feats), n_classes), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(test_feats)), k), train_labels[nn].ravel()), 1)
    return votes.argmax(axis=1)


def knn_probe(source, dataset: Dataset, k: int = 5) -> float:
    enc = _as_encoder(source)
    check_compatible(enc, dataset)
    ftr = encode(enc, dataset, dataset.x_train)
    fte = encode(enc, dataset, dataset.x_test)
    pred = knn_predict(ftr.astype(np.float64), dataset.y_train, fte.astype(np.float64), k, dataset.n_classes)
    return float(np.mean(pred == dataset.y_test))


def probe_config_from(ckpt_or_text) -> ProbeSection:
    text = ckpt_or_text.descriptors["config"] if isinstance(ckpt_or_text, Checkpoint) else ckpt_or_text
    return parse_config(text).probe
