"""Pre-training loop, metrics log and checkpoint round-trips."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from feataug import autodiff as ad
from feataug.architectures import Models, build_models, forward_step
from feataug.checkpoint import Checkpoint, CheckpointError
from feataug.config import RunConfig, dump_config, parse_config, validate
from feataug.data_aug import augment_batch, make_pipeline, synthetic_view, to_float
from feataug.datasets import Dataset, cifar_dataset, synthetic_dataset
from feataug.feature_aug import FeatureBank
from feataug.networks import SmallConvSpec, build_mlp_encoder, spec_to_dict
from feataug.optim import (
    clip_grad_norm,
    cosine_warmup_lr,
    ema_momentum,
    ema_update,
    global_grad_norm,
    sgd_step,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "epoch",
    "lr",
    "ema_m",
    "loss_total",
    "loss_original",
    "loss_fa",
    "grad_norm",
    "wall_ms",
)


class TrainingError(RuntimeError):
    pass


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.kind == "synthetic":
        return synthetic_dataset(cfg.synthetic_spec(), d.seed, d.test_fraction)
    return cifar_dataset(d.cifar_dir, d.cifar_records_per_file or None)


def encoder_spec_for(cfg: RunConfig, dataset: Dataset):
    m = cfg.model
    if dataset.kind == "vector":
        return build_mlp_encoder(dataset.x_train.shape[1], m.encoder_hidden, m.embedding_dim)
    return SmallConvSpec(3, dataset.x_train.shape[-1], tuple(m.conv_channels), m.embedding_dim)


def encoder_input(dataset: Dataset, x: np.ndarray) -> np.ndarray:
    """Network input for raw dataset rows (images are standardized floats)."""
    return to_float(x) if dataset.kind == "image" else x


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Every step draws from its own stream, so a resumed run replays exactly."""
    return np.random.default_rng([seed, step])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    ema_m: float | None
    loss_total: float
    loss_original: float
    loss_fa: float | None
    grad_norm: float
    wall_ms: float

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in METRIC_COLUMNS]


class Trainer:
    """Owns the models, optimizer state and feature bank of one run."""

    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        validate(cfg)
        ad.set_precision(cfg.train.precision)
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else load_dataset(cfg)
        self.layout = cfg.layout_spec()
        self.opt = cfg.optim_config()
        m = cfg.model
        self.encoder_spec = encoder_spec_for(cfg, self.dataset)
        self.models: Models = build_models(
            self.layout,
            self.encoder_spec,
            projector_hidden=m.projector_hidden,
            embedding_dim=m.embedding_dim,
            predictor_hidden=m.predictor_hidden,
            seed=cfg.train.seed,
            projector_last_bn=m.projector_last_bn,
            predictor_bn=m.predictor_bn,
        )
        fa = self.layout.fa
        self.bank = FeatureBank(fa.bank_capacity, m.embedding_dim) if fa.enabled and fa.needs_bank else None
        self.velocity: dict[str, np.ndarray] = {}
        self.step = 0
        self.total_steps = cfg.total_steps
        self.warmup_steps = cfg.warmup_steps
        if self.dataset.kind == "vector":
            self.vec_aug = cfg.vector_aug()
            self.data_std = self.dataset.data_std
        else:
            size = self.dataset.x_train.shape[-1]
            self.pipelines = make_pipeline(cfg.aug.setting, size, crop_min_area=cfg.aug.crop_min_area)

    # ------------------------------------------------------------ data

    def sample_views(self, rng: np.random.Generator, batch_size: int | None = None, index=None):
        x = self.dataset.x_train
        b = batch_size or self.cfg.optim.batch_size
        idx = rng.choice(len(x), size=b, replace=False) if index is None else np.asarray(index)
        batch = x[idx]
        if self.dataset.kind == "vector":
            va = synthetic_view(batch, rng, self.vec_aug, self.data_std)
            vp = synthetic_view(batch, rng, self.vec_aug, self.data_std)
            return va, vp
        base = int(rng.integers(2**63))
        anchor, positive = self.pipelines
        workers = self.cfg.aug.workers
        va = augment_batch(batch, anchor, base, 2 * idx, workers=workers)
        vp = augment_batch(batch, positive, base, 2 * idx + 1, workers=workers)
        return to_float(va), to_float(vp)

    def warm_bank(self) -> None:
        """Fill the bank with positive-branch features of fresh batches."""
        if self.bank is None:
            return
        need = max(self.cfg.fa.bank_warmup or self.cfg.optim.batch_size, self.layout.fa.k)
        rng = np.random.default_rng([self.cfg.train.seed, 2**31 - 1])
        while self.bank.fill < min(need, self.bank.capacity):
            _, vp = self.sample_views(rng)
            net = self.models.target_parts() or self.models.online_parts()
            enc = net.get("target_encoder") or net["encoder"]
            proj = net.get("target_projector") or net["projector"]
            self.bank.push(proj(enc(vp, track_stats=False), track_stats=False))

    # ------------------------------------------------------------ steps

    def _set_params(self, flat: dict[str, ad.Tensor]) -> None:
        parts = self.models.online_parts()
        for name, t in flat.items():
            part, key = name.split(".", 1)
            parts[part].state.params[key] = t

    def accumulate(self, rng: np.random.Generator, micro_batches=None):
        """Forward/backward over ``accum_steps`` micro-batches.

        Each micro-batch loss is scaled by ``1/accum_steps`` so the summed
        leaf gradients equal those of the averaged loss.  Returns the
        gradients and per-term loss values.
        """
        params = self.models.trainable()
        for p in params.values():
            p.grad = None
        n = self.opt.accum_steps
        totals, originals, fas = [], [], []
        for i in range(n):
            if micro_batches is not None:
                va, vp = micro_batches[i]
            else:
                va, vp = self.sample_views(rng)
            out = forward_step(self.layout, self.models, va, vp, self.bank, rng)
            loss = ad.scale(out.total, 1.0 / n) if n > 1 else out.total
            ad.backward(loss)
            totals.append(out.total.item())
            originals.append(out.loss_original)
            fas.extend(out.loss_fa)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        return params, grads, float(np.mean(totals)), float(np.mean(originals)), (float(np.mean(fas)) if fas else None)

    def train_step(self) -> StepMetrics:
        t0 = time.perf_counter()
        step = self.step
        if self.bank is not None and self.bank.fill < self.layout.fa.k:
            self.warm_bank()
        rng = step_rng(self.cfg.train.seed, step)
        try:
            params, grads, total, orig, fa = self.accumulate(rng)
        except ad.NonFiniteError as e:
            raise TrainingError(f"non-finite value at step {step}: {e}") from e
        gn = global_grad_norm(grads)
        if not math.isfinite(gn) or not math.isfinite(total):
            raise TrainingError(f"non-finite loss/gradient at step {step}: loss={total}, grad_norm={gn}")
        if self.opt.clip_norm > 0:
            grads = clip_grad_norm(grads, self.opt.clip_norm)
        lr = cosine_warmup_lr(step, self.warmup_steps, self.total_steps, self.opt.base_lr)
        sgd_step(params, grads, self.velocity, lr, self.opt)
        self._set_params(params)
        ema_m = None
        if self.layout.use_ema:
            ema_m = ema_momentum(step, self.total_steps, self.cfg.ema.m_base)
            ema_update(self.models.encoder, self.models.target_encoder, ema_m)
            ema_update(self.models.projector, self.models.target_projector, ema_m)
        self.step += 1
        wall = (time.perf_counter() - t0) * 1000 if self.cfg.train.record_wall_time else 0.0
        return StepMetrics(
            step, step // self.cfg.optim.steps_per_epoch, lr, ema_m, total, orig, fa, gn, round(wall, 3)
        )

    def run(self, until: int | None = None, on_step=None) -> list[StepMetrics]:
        until = self.total_steps if until is None else min(until, self.total_steps)
        rows = []
        while self.step < until:
            m = self.train_step()
            rows.append(m)
            if on_step is not None:
                on_step(self, m)
        return rows

    # ------------------------------------------------------------ checkpoints

    def checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for part, net in self.models.all_parts().items():
            for k, v in net.state.params.items():
                tensors[f"param/{part}.{k}"] = v.data
            for k, s in net.state.bn_state.items():
                tensors[f"bn/{part}.{k}.running_mean"] = s.running_mean
                tensors[f"bn/{part}.{k}.running_var"] = s.running_var
        for k, v in self.velocity.items():
            tensors[f"opt/{k}"] = v
        state = {"step": self.step, "rng": {"scheme": "per-step", "seed": self.cfg.train.seed}}
        if self.bank is not None:
            tensors["bank/storage"] = self.bank.storage
            state["bank"] = {"capacity": self.bank.capacity, "cursor": self.bank.cursor, "fill": self.bank.fill}
        descriptors = {
            "config": dump_config(self.cfg),
            "networks": {part: spec_to_dict(net.spec) for part, net in self.models.all_parts().items()},
        }
        return Checkpoint(descriptors, state, tensors)

    def load_state(self, ckpt: Checkpoint) -> None:
        dtype = ad.get_dtype()
        T = ckpt.tensors
        for part, net in self.models.all_parts().items():
            for k in net.state.params:
                net.state.params[k] = ad.Tensor(T[f"param/{part}.{k}"].astype(dtype), True)
            for k, s in net.state.bn_state.items():
                s.running_mean = T[f"bn/{part}.{k}.running_mean"].astype(dtype)
                s.running_var = T[f"bn/{part}.{k}.running_var"].astype(dtype)
        self.velocity = {k[4:]: v.astype(dtype) for k, v in T.items() if k.startswith("opt/")}
        self.step = int(ckpt.state["step"])
        if self.bank is not None:
            b = ckpt.state["bank"]
            self.bank.storage = T["bank/storage"].astype(dtype)
            self.bank.cursor, self.bank.fill = int(b["cursor"]), int(b["fill"])

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Dataset | None = None) -> "Trainer":
        try:
            cfg = parse_config(ckpt.descriptors["config"])
        except KeyError:
            raise CheckpointError("checkpoint lacks a run configuration") from None
        trainer = cls(cfg, dataset)
        trainer.load_state(ckpt)
        return trainer


# ---------------------------------------------------------------- metrics log


def metrics_csv(rows: list[StepMetrics], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()


def train_pretrain(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[StepMetrics]]:
    """Run (or continue) pre-training; writes metrics and checkpoints when ``out_dir`` is set."""
    trainer = Trainer.from_checkpoint(resume, dataset) if resume is not None else Trainer(cfg, dataset)
    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        if resume is None or not os.path.exists(metrics_path):
            with open(metrics_path, "w", encoding="utf-8") as fh:
                fh.write(metrics_csv([], header=True))
        else:
            # drop rows past the checkpoint so the replayed steps are not duplicated
            with open(metrics_path, encoding="utf-8") as fh:
                lines = fh.read().splitlines(keepends=True)
            kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < trainer.step]
            with open(metrics_path, "w", encoding="utf-8") as fh:
                fh.writelines(kept)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(trainer.cfg))
    every = trainer.cfg.train.checkpoint_every

    def on_step(tr: Trainer, m: StepMetrics):
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(metrics_csv([m], header=False))
            if every and tr.step % every == 0:
                tr.checkpoint().save(os.path.join(out_dir, f"checkpoint_{tr.step:06d}.facn"))
        if m.step % 100 == 0:
            log.info("step %d loss %.4f lr %.4f", m.step, m.loss_total, m.lr)

    rows = trainer.run(on_step=on_step)
    ckpt = trainer.checkpoint()
    if out_dir:
        ckpt.save(os.path.join(out_dir, "checkpoint.facn"))
    return ckpt, rows


# ---------------------------------------------------------------- export

_INT_COLUMNS = ("step", "epoch")


def parse_metrics_csv(text: str) -> list[dict]:
    """Typed rows: ints for step/epoch, floats elsewhere, ``None`` for empty fields."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != METRIC_COLUMNS:
        raise ValueError(f"metrics header must be {','.join(METRIC_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if len(rec) != len(METRIC_COLUMNS):
            raise ValueError(f"metrics line {lineno}: expected {len(METRIC_COLUMNS)} fields, got {len(rec)}")
        row = {}
        for col, raw in zip(METRIC_COLUMNS, rec):
            if raw == "":
                row[col] = None
            else:
                row[col] = int(raw) if col in _INT_COLUMNS else float(raw)
        rows.append(row)
    return rows


def metrics_rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def metrics_to_json(text: str) -> str:
    return json.dumps({"columns": list(METRIC_COLUMNS), "rows": parse_metrics_csv(text)}, indent=1) + "\n"


def metrics_from_json(text: str) -> str:
    """Inverse of :func:`metrics_to_json`; reproduces the csv text exactly."""
    blob = json.loads(text)
    if blob.get("columns") != list(METRIC_COLUMNS):
        raise ValueError("unexpected metrics columns")
    return metrics_rows_to_csv(blob["rows"])
