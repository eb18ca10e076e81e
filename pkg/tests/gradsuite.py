"""Finite-difference cases shared by the unit tests and the acceptance gate."""

from __future__ import annotations

import numpy as np

from feataug import autodiff as ad
from feataug.architectures import LayoutSpec, build_models, forward_step
from feataug.feature_aug import FaConfig, FeatureBank
from feataug.losses import byol_similarity, info_nce
from feataug.networks import build_mlp_encoder

from oracles import check_op_grad, rel_error

SEEDS = range(10)
TOL = 1e-4


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    # keeps relu inputs clear of the kink at the finite-difference step
    return np.sign(x) * (np.abs(x) + 0.05)


def _row_case(rng, b=4, d=3):
    return rng.normal(size=(b, d)), rng.normal(size=(b, d))


def op_cases():
    """name -> (build function, input factory)."""
    return {
        "matmul": (ad.matmul, lambda r: [r.normal(size=(4, 3)), r.normal(size=(3, 5))]),
        "add": (ad.add, lambda r: list(_row_case(r))),
        "add_row": (ad.add, lambda r: [r.normal(size=(4, 3)), r.normal(size=3)]),
        "sub": (ad.sub, lambda r: list(_row_case(r))),
        "mul": (ad.mul, lambda r: list(_row_case(r))),
        "mul_row": (ad.mul, lambda r: [r.normal(size=(4, 3)), r.normal(size=3)]),
        "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(4, 3))]),
        "relu": (ad.relu, lambda r: [_away_from_zero(r.normal(size=(4, 3)))]),
        "conv2d": (ad.conv2d, lambda r: [r.normal(size=(2, 2, 4, 4)), r.normal(size=(3, 2, 3, 3))]),
        "avg_pool2": (ad.avg_pool2, lambda r: [r.normal(size=(2, 2, 4, 6))]),
        "batch_norm_train": (
            lambda x, g, b: ad.batch_norm(x, g, b, None, "train"),
            lambda r: [r.normal(size=(5, 3)) * 2 + 1, r.normal(size=3), r.normal(size=3)],
        ),
        "batch_norm_eval": (
            lambda x, g, b: ad.batch_norm(x, g, b, _eval_state(), "eval"),
            lambda r: [r.normal(size=(5, 3)), r.normal(size=3), r.normal(size=3)],
        ),
        "l2_normalize": (ad.l2_normalize, lambda r: [r.normal(size=(4, 3))]),
        "logsumexp_rows": (ad.logsumexp_rows, lambda r: [r.normal(size=(4, 5)) * 3]),
        "info_nce": (lambda a, p: info_nce(a, p, 0.2), lambda r: list(_row_case(r, 5, 4))),
        "info_nce_symmetric": (
            lambda a, p: info_nce(a, p, 0.5, symmetric_negatives=True),
            lambda r: list(_row_case(r, 5, 4)),
        ),
        "byol_similarity": (byol_similarity, lambda r: list(_row_case(r, 5, 4))),
    }


def _eval_state():
    s = ad.BatchNormState(3)
    s.running_mean = np.array([0.3, -0.2, 0.1])
    s.running_var = np.array([1.5, 0.7, 2.0])
    return s


def op_error(name: str, seed: int) -> float:
    build, make = op_cases()[name]
    return check_op_grad(build, make(np.random.default_rng(seed)))


# ---------------------------------------------------------------- composed layouts

LAYOUT_CASES = (
    ("Basic", False),
    ("Basic", True),
    ("ParallelPred", False),
    ("ParallelPred", True),
    ("PostPred", True),
    ("PrePred", True),
    ("ByolFa", True),
)
FA_CYCLE = ("mask", "nn", "nn_noise", "batch_noise", "gaussian_noise", "none")


class _Routed:
    """Sends the positive-branch input through a frozen copy of the network.

    With stop-gradient on, the analytic gradient only follows the anchor
    path; evaluating the positive path with frozen weights gives finite
    differences of exactly that function.
    """

    def __init__(self, live, frozen, frozen_inputs: dict):
        # id -> tensor; holding the tensor keeps its id from being recycled
        self.live, self.frozen, self.frozen_inputs = live, frozen, frozen_inputs

    def __call__(self, x, mode="train", *, track_stats=True):
        if self.frozen_inputs.get(id(x)) is x:
            out = self.frozen(x, mode, track_stats=track_stats)
            self.frozen_inputs[id(out)] = out
            return out
        return self.live(x, mode, track_stats=track_stats)


def layout_error(layout: str, stop_grad: bool, seed: int, h: float = 1e-5) -> float:
    """Worst relative error over random directions and coordinates of the online parameters."""
    from feataug.architectures import Models
    from feataug.networks import Network

    method = FA_CYCLE[seed % len(FA_CYCLE)]
    fa = FaConfig(method, k=2 if seed % 2 else 1, mask_rate=0.34, bank_capacity=16)
    spec = LayoutSpec(
        layout,
        stop_grad=stop_grad,
        fa=fa,
        projector="byol" if layout == "ByolFa" else "strong",
        use_ema=layout == "ByolFa",
        combine="Free" if seed % 3 == 0 else "Average",
        temperature=0.5,
    )
    with ad.precision("float64"):
        rng = np.random.default_rng(seed)
        models = build_models(
            spec, build_mlp_encoder(6, 5, 4), projector_hidden=5, embedding_dim=3, predictor_hidden=4, seed=seed
        )
        # nonzero biases: with zero init a row whose hidden units are all dead maps to the
        # zero vector, where l2 normalization has no derivative
        for name, t in models.trainable().items():
            if name.endswith(".bias"):
                t.data[...] = 0.3 * rng.normal(size=t.shape)
        if layout == "ByolFa":
            # separate target weights so the check does not rely on equality with the online ones
            for net in models.target_parts().values():
                for t in net.state.params.values():
                    t.data[...] += 0.1 * rng.normal(size=t.shape)
        va = ad.Tensor(rng.normal(size=(6, 6)))
        vp = ad.Tensor(rng.normal(size=(6, 6)))
        bank = FeatureBank(16, 3, np.float64)
        bank.push(rng.normal(size=(16, 3)))

        def loss(m):
            return forward_step(spec, m, va, vp, bank, np.random.default_rng(1000 + seed), push=False).total

        params = models.trainable()
        analytic = ad.backward(loss(models), params)
        fd_models = models
        if stop_grad and layout != "ByolFa":
            ids = {id(vp): vp}
            enc_frozen = Network(models.encoder.spec, models.encoder.state.copy(False))
            proj_frozen = Network(models.projector.spec, models.projector.state.copy(False))
            fd_models = Models(
                _Routed(models.encoder, enc_frozen, ids),
                _Routed(models.projector, proj_frozen, ids),
                models.predictor,
            )
        names = sorted(params)
        flat = np.concatenate([params[n].data.ravel() for n in names])
        grad = np.concatenate([analytic[n].ravel() for n in names])

        def set_flat(v):
            pos = 0
            for n in names:
                t = params[n]
                t.data[...] = v[pos : pos + t.data.size].reshape(t.shape)
                pos += t.data.size

        def f_at(v):
            set_flat(v)
            return loss(fd_models).item()

        errors = []
        probe_rng = np.random.default_rng(seed + 77)
        for _ in range(3):
            d = probe_rng.normal(size=flat.shape)
            d /= np.linalg.norm(d)
            num = (f_at(flat + h * d) - f_at(flat - h * d)) / (2 * h)
            errors.append(rel_error(np.array([grad @ d]), np.array([num])))
        coords = probe_rng.choice(flat.size, size=15, replace=False)
        num = []
        for c in coords:
            e = np.zeros_like(flat)
            e[c] = h
            num.append((f_at(flat + e) - f_at(flat - e)) / (2 * h))
        errors.append(rel_error(grad[coords], np.array(num)))
        set_flat(flat)
    return max(errors)
