"""Measurements shared by the unit tests and the acceptance gate."""

from __future__ import annotations

import csv
import io
import os

import numpy as np

from feataug import autodiff as ad
from feataug.ablate import run_suite, suite_grid, to_csv, to_markdown
from feataug.architectures import LayoutSpec, build_models, forward_step
from feataug.checkpoint import Checkpoint
from feataug.config import RunConfig, load_config
from feataug.datasets import CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, SyntheticSpec, synthetic_dataset, write_cifar_file
from feataug.evaluation import linear_probe
from feataug.feature_aug import METHODS, FaConfig, FeatureBank
from feataug.networks import build_mlp_encoder
from feataug.train import Trainer, parse_metrics_csv, train_pretrain

FA_METHODS = METHODS[1:]
CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def positive_branch_grad_norm(layout: str, stop_grad: bool, method: str, seed: int) -> float:
    """Norm of the gradient reaching the positive/target branch output and target weights."""
    spec = LayoutSpec(
        layout,
        stop_grad=stop_grad,
        fa=FaConfig(method, k=2, mask_rate=0.25, bank_capacity=64),
        projector="byol" if layout == "ByolFa" else "strong",
        use_ema=layout == "ByolFa",
    )
    with ad.precision("float64"):
        rng = np.random.default_rng(seed)
        models = build_models(
            spec, build_mlp_encoder(12, 16, 8), projector_hidden=16, embedding_dim=8, predictor_hidden=8, seed=seed
        )
        bank = FeatureBank(64, 8, np.float64)
        bank.push(rng.normal(size=(64, 8)))
        out = forward_step(spec, models, rng.normal(size=(10, 12)), rng.normal(size=(10, 12)), bank, rng)
        target = models.target_params()
        for t in target.values():
            t.grad = None
        ad.backward(out.total)
        sq = 0.0 if out.positive_raw.grad is None else float(np.sum(out.positive_raw.grad**2))
        for t in target.values():
            if t.grad is not None:
                sq += float(np.sum(t.grad**2))
    return float(np.sqrt(sq))


def accumulation_error(seed: int, b: int = 8) -> float:
    """Max |grad(accum 2 x b) - grad(1 x 2b)| for a BN-free EMA-target model at 64 bit."""
    ds = synthetic_dataset(SyntheticSpec(samples_per_cluster=20, input_dim=16), seed)
    base = {
        "layout.kind": "ByolFa",
        "model.projector": "weak",
        "model.predictor_bn": False,
        "model.encoder_hidden": 32,
        "model.embedding_dim": 16,
        "model.projector_hidden": 32,
        "model.predictor_hidden": 16,
        "fa.method": "none",
        "train.precision": "float64",
        "train.seed": seed,
        "optim.batch_size": 2 * b,
        "data.input_dim": 16,
    }
    big = Trainer(RunConfig().copy(base), ds)
    small = Trainer(RunConfig().copy({**base, "optim.accum_steps": 2, "optim.batch_size": b}), ds)
    rng = np.random.default_rng(seed)
    va, vp = big.sample_views(rng)
    _, g_big, *_ = big.accumulate(rng, micro_batches=[(va, vp)])
    _, g_small, *_ = small.accumulate(rng, micro_batches=[(va[:b], vp[:b]), (va[b:], vp[b:])])
    return max(float(np.max(np.abs(g_big[k] - g_small[k]))) for k in g_big)


def smoke_config(**overrides) -> RunConfig:
    return load_config(os.path.join(CONFIG_DIR, "smoke.cfg")).copy(overrides)


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def determinism_check(workdir: str, steps_per_epoch: int = 100, epochs: int = 2) -> tuple[bool, bool]:
    """(two fresh runs log identical bytes, resume from the midpoint replays the same rows)."""
    cfg = smoke_config(**{
        "fa.method": "nn",
        "optim.steps_per_epoch": steps_per_epoch,
        "optim.total_epochs": epochs,
        "train.checkpoint_every": steps_per_epoch,
    })
    a, b, c = (os.path.join(workdir, n) for n in "abc")
    train_pretrain(cfg, out_dir=a)
    train_pretrain(cfg, out_dir=b)
    identical = _read(os.path.join(a, "metrics.csv")) == _read(os.path.join(b, "metrics.csv"))
    mid = Checkpoint.load(os.path.join(a, f"checkpoint_{steps_per_epoch:06d}.facn"))
    train_pretrain(cfg, out_dir=c, resume=mid)
    full = parse_metrics_csv(_read(os.path.join(a, "metrics.csv")))
    resumed = parse_metrics_csv(_read(os.path.join(c, "metrics.csv")))
    return identical, len(full) == epochs * steps_per_epoch and full[steps_per_epoch:] == resumed


# (rows, columns, extra reference cells) per suite
ABLATION_SHAPES = {
    "architectures": (5, 6, 0),
    "byol-fa": (4, 5, 1),
    "stopgrad": (6, 6, 0),
    "da-settings": (3, 6, 0),
}

ABLATION_TINY = {
    "data.samples_per_cluster": 12,
    "data.input_dim": 16,
    "model.encoder_hidden": 16,
    "model.embedding_dim": 8,
    "model.projector_hidden": 16,
    "model.predictor_hidden": 8,
    "optim.batch_size": 8,
    "optim.steps_per_epoch": 2,
    "optim.total_epochs": 2,
    "fa.bank_capacity": 16,
    "train.record_wall_time": False,
    "probe.epochs": 2,
    "probe.milestones": (1,),
    "probe.knn_k": 3,
    "ablate.steps": 2,
}


def write_fake_cifar(directory: str, records: int = 6, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        labels = rng.integers(0, 10, records)
        write_cifar_file(os.path.join(directory, name), rng.integers(0, 256, (records, 3, 32, 32)), labels)


def ablation_config(suite: str, workdir: str) -> RunConfig:
    overrides = dict(ABLATION_TINY)
    if suite == "da-settings":
        write_fake_cifar(workdir)
        overrides.update({
            "data.kind": "cifar10",
            "data.cifar_dir": workdir,
            "data.cifar_records_per_file": 0,
            "model.conv_channels": (2, 2, 2),
            "probe.knn_k": 1,
        })
    return RunConfig().copy(overrides)


def grid_is_complete(suite: str, csv_text: str, md_text: str) -> bool:
    """Every configured cell appears exactly once in the csv and every row once in the markdown."""
    n_rows, n_cols, extra = ABLATION_SHAPES[suite]
    grid = suite_grid(suite)
    records = list(csv.DictReader(io.StringIO(csv_text)))
    keys = [(r["row"], r["column"]) for r in records]
    expected = set(grid.cells) | ({(grid.baseline[0], "none")} if grid.baseline else set())
    shape_ok = len(grid.rows) == n_rows and len(grid.columns) == n_cols and len(expected) == n_rows * n_cols + extra
    filled = all(r["accuracy"] not in ("", "nan") for r in records)
    md_rows = [ln for ln in md_text.splitlines() if ln.startswith("| ") and not ln.startswith("| Method")]
    md_ok = [ln.split(" | ")[0][2:] for ln in md_rows] == list(grid.rows)
    return shape_ok and filled and md_ok and len(keys) == len(set(keys)) and set(keys) == expected


def run_ablation(suite: str, workdir: str) -> bool:
    result = run_suite(suite, ablation_config(suite, workdir))
    return grid_is_complete(suite, to_csv(result), to_markdown(result))


SMOKE_SEEDS = (0, 1, 2)
SMOKE_METHODS = ("none",) + FA_METHODS


def moving_average(values, window: int = 50) -> np.ndarray:
    return np.convolve(np.asarray(values, dtype=np.float64), np.ones(window) / window, mode="valid")


def smoke_run(seed: int, method: str) -> dict:
    """Pre-train one desk-scale ParallelPred run and probe it."""
    cfg = smoke_config(**{"train.seed": seed, "fa.method": method})
    trainer = Trainer(cfg)
    losses = [m.loss_total for m in trainer.run()]
    ma = moving_average(losses)
    return {
        "steps": len(losses),
        "ma_start": float(ma[0]),
        "ma_end": float(ma[-1]),
        "probe": linear_probe(trainer.models.encoder, trainer.dataset, cfg.probe).accuracy,
    }


def random_init_probe(seed: int) -> float:
    cfg = smoke_config(**{"train.seed": seed})
    trainer = Trainer(cfg)
    return linear_probe(trainer.models.encoder, trainer.dataset, cfg.probe).accuracy
