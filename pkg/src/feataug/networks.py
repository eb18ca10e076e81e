"""Encoder, projector and predictor networks on top of the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from feataug import autodiff as ad
from feataug.autodiff import BatchNormState, Tensor


@dataclass(frozen=True)
class MlpSpec:
    """Stack of linear layers, each optionally followed by BN and ReLU."""

    in_dim: int
    widths: tuple[int, ...]
    batch_norm: tuple[bool, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        n = len(self.widths)
        if n == 0 or len(self.batch_norm) != n or len(self.activations) != n:
            raise ValueError("widths, batch_norm and activations must have equal non-zero length")
        if self.in_dim <= 0 or any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if any(a not in ("relu", "none") for a in self.activations):
            raise ValueError(f"unknown activation in {self.activations}")

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_bn(self) -> int:
        return sum(self.batch_norm)


@dataclass(frozen=True)
class SmallConvSpec:
    """Three conv3x3-relu-avgpool stages, flatten, then one linear layer."""

    in_channels: int = 3
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    out_dim: int = 64

    def __post_init__(self):
        if self.image_size not in (32, 64):
            raise ValueError("smallconv encoder needs 32x32 or 64x64 inputs")
        if len(self.channels) != 3:
            raise ValueError("smallconv encoder has exactly three stages")

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * (self.image_size // 8) ** 2


NetSpec = Union[MlpSpec, SmallConvSpec]


def build_projector(kind: str, in_dim: int, hidden: int, out_dim: int, *, last_bn: bool = True) -> MlpSpec:
    """Projector head.

    ``weak`` is two linear layers with no BN; ``strong`` is three linear
    layers each followed by BN, ReLU on all but the last (``last_bn=False``
    drops the final BN).  ``byol`` is the two-layer head with BN+ReLU after
    the first layer only.
    """
    if kind == "weak":
        return MlpSpec(in_dim, (hidden, out_dim), (False, False), ("relu", "none"))
    if kind == "strong":
        return MlpSpec(in_dim, (hidden, hidden, out_dim), (True, True, last_bn), ("relu", "relu", "none"))
    if kind == "byol":
        return MlpSpec(in_dim, (hidden, out_dim), (True, False), ("relu", "none"))
    raise ValueError(f"unknown projector kind {kind!r}")


def build_predictor(in_dim: int, hidden: int, out_dim: int, *, batch_norm: bool = True) -> MlpSpec:
    return MlpSpec(in_dim, (hidden, out_dim), (batch_norm, False), ("relu", "none"))


def build_mlp_encoder(in_dim: int, hidden: int, out_dim: int) -> MlpSpec:
    return MlpSpec(in_dim, (hidden, hidden, out_dim), (False, False, False), ("relu", "relu", "none"))


@dataclass
class ModelParams:
    """Trainable tensors by name plus the running statistics of BN layers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    bn_state: dict[str, BatchNormState] = field(default_factory=dict)

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.bn_state.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: NetSpec, seed: int) -> ModelParams:
    """Xavier-uniform weights, zero biases, BN gamma 1 / beta 0."""
    rng = np.random.default_rng(seed)
    out = ModelParams()
    P = out.params
    if isinstance(spec, MlpSpec):
        fan_in = spec.in_dim
        for i, (w, bn) in enumerate(zip(spec.widths, spec.batch_norm)):
            P[f"{i}.weight"] = Tensor(_xavier(rng, fan_in, w, (fan_in, w)), True)
            P[f"{i}.bias"] = Tensor(np.zeros(w), True)
            if bn:
                P[f"{i}.bn.gamma"] = Tensor(np.ones(w), True)
                P[f"{i}.bn.beta"] = Tensor(np.zeros(w), True)
                out.bn_state[f"{i}.bn"] = BatchNormState(w)
            fan_in = w
    elif isinstance(spec, SmallConvSpec):
        c_in = spec.in_channels
        for i, c in enumerate(spec.channels):
            P[f"conv{i}.kernel"] = Tensor(_xavier(rng, c_in * 9, c * 9, (c, c_in, 3, 3)), True)
            c_in = c
        P["fc.weight"] = Tensor(_xavier(rng, spec.flat_dim, spec.out_dim, (spec.flat_dim, spec.out_dim)), True)
        P["fc.bias"] = Tensor(np.zeros(spec.out_dim), True)
    else:
        raise TypeError(f"unsupported spec {type(spec).__name__}")
    return out


def forward(spec: NetSpec, params: ModelParams, x, mode: str = "train", *, track_stats: bool = True) -> Tensor:
    x = ad.as_tensor(x)
    P = params.params
    if isinstance(spec, MlpSpec):
        if x.data.ndim != 2 or x.shape[1] != spec.in_dim:
            raise ValueError(f"expected input b*{spec.in_dim}, got {x.shape}")
        h = x
        for i, (bn, act) in enumerate(zip(spec.batch_norm, spec.activations)):
            h = ad.add(ad.matmul(h, P[f"{i}.weight"]), P[f"{i}.bias"])
            if bn:
                h = ad.batch_norm(
                    h, P[f"{i}.bn.gamma"], P[f"{i}.bn.beta"], params.bn_state[f"{i}.bn"], mode, track_stats=track_stats
                )
            if act == "relu":
                h = ad.relu(h)
        return h
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"expected input b*{expected}, got {x.shape}")
    h = x
    for i in range(len(spec.channels)):
        h = ad.avg_pool2(ad.relu(ad.conv2d(h, P[f"conv{i}.kernel"])))
    return ad.add(ad.matmul(ad.flatten(h), P["fc.weight"]), P["fc.bias"])


@dataclass
class Network:
    """A spec bound to its parameters."""

    spec: NetSpec
    state: ModelParams

    @classmethod
    def create(cls, spec: NetSpec, seed: int) -> "Network":
        return cls(spec, init_params(spec, seed))

    def __call__(self, x, mode: str = "train", *, track_stats: bool = True) -> Tensor:
        return forward(self.spec, self.state, x, mode, track_stats=track_stats)

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim


def spec_to_dict(spec: NetSpec) -> dict:
    if isinstance(spec, MlpSpec):
        return {
            "kind": "mlp",
            "in_dim": spec.in_dim,
            "widths": list(spec.widths),
            "batch_norm": list(spec.batch_norm),
            "activations": list(spec.activations),
        }
    return {
        "kind": "smallconv",
        "in_channels": spec.in_channels,
        "image_size": spec.image_size,
        "channels": list(spec.channels),
        "out_dim": spec.out_dim,
    }


def spec_from_dict(d: dict) -> NetSpec:
    if d["kind"] == "mlp":
        return MlpSpec(d["in_dim"], tuple(d["widths"]), tuple(d["batch_norm"]), tuple(d["activations"]))
    return SmallConvSpec(d["in_channels"], d["image_size"], tuple(d["channels"]), d["out_dim"])
