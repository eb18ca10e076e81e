"""Run configuration: ``section.key = value`` files with strict validation.

Example::

    # desk-scale ParallelPred + NN
    layout.kind = ParallelPred
    fa.method = nn
    optim.base_lr = 0.3

Unknown sections or keys are rejected, and every value is type-checked and
validated before any computation starts.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields

from feataug.architectures import COMBINE_MODES, LAYOUTS, PAIR_MODES, LayoutSpec
from feataug.data_aug import SETTINGS, VectorAugConfig
from feataug.datasets import SyntheticSpec
from feataug.feature_aug import METHODS, FaConfig
from feataug.optim import EmaConfig, OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kind: str = "synthetic"  # synthetic | cifar10
    n_clusters: int = 10
    latent_dim: int = 16
    input_dim: int = 128
    samples_per_cluster: int = 500
    spread: float = 0.1
    projection_seed: int = 0
    activation: str = "sin"
    gain: float = 15.0
    seed: int = 0
    test_fraction: float = 0.2
    cifar_dir: str = ""
    cifar_records_per_file: int = 10000  # 0 accepts any whole number of records


@dataclass
class ModelSection:
    embedding_dim: int = 64
    encoder_hidden: int = 256
    conv_channels: tuple[int, ...] = (16, 32, 64)
    projector: str = ""  # weak | strong | byol; empty picks the layout default
    projector_hidden: int = 256
    projector_last_bn: bool = True
    predictor_hidden: int = 128
    predictor_bn: bool = True


@dataclass
class LayoutSection:
    kind: str = "ParallelPred"
    stop_grad: bool = True
    pair_mode: str = "OrigVsFA"
    combine: str = "Average"
    temperature: float = 0.2
    symmetric_negatives: bool = False
    byol_symmetric: bool = True


@dataclass
class FaSection:
    method: str = "none"
    k: int = 1
    mask_rate: float = 0.2
    alpha: float = 0.85
    gaussian_sigma: float = 0.2
    bank_capacity: int = 4096
    bank_warmup: int = 0  # rows pushed before step 0; 0 means one batch


@dataclass
class AugSection:
    setting: str = "AsymmStrongAug"
    crop_min_area: float = 0.2
    noise_sigma: float = 0.1
    mask_rate: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1
    workers: int = 0


@dataclass
class OptimSection:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lars: bool = True
    lars_trust_coef: float = 0.02
    lars_eps: float = 1e-9
    clip_norm: float = -1.0  # < 0: 1.0, or off for ByolFa; 0: off
    accum_steps: int = 1
    warmup_epochs: int = 1
    total_epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 128


@dataclass
class EmaSection:
    m_base: float = 0.99


@dataclass
class TrainSection:
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    record_wall_time: bool = True
    out_dir: str = "runs/default"


@dataclass
class ProbeSection:
    epochs: int = 15
    milestones: tuple[int, ...] = (10, 12, 14)
    batch_size: int = 256
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    standardize: bool = True
    knn_k: int = 5
    seed: int = 0


@dataclass
class AblateSection:
    steps: int = 0  # 0 keeps the run's own schedule
    seeds: tuple[int, ...] = (0,)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    fa: FaSection = field(default_factory=FaSection)
    aug: AugSection = field(default_factory=AugSection)
    optim: OptimSection = field(default_factory=OptimSection)
    ema: EmaSection = field(default_factory=EmaSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- derived views -------------------------------------------------

    @property
    def total_steps(self) -> int:
        return self.optim.total_epochs * self.optim.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.optim.warmup_epochs * self.optim.steps_per_epoch

    def projector_kind(self) -> str:
        if self.model.projector:
            return self.model.projector
        return "byol" if self.layout.kind == "ByolFa" else "strong"

    def fa_config(self) -> FaConfig:
        f = self.fa
        return FaConfig(f.method, f.k, f.mask_rate, f.alpha, f.gaussian_sigma, f.bank_capacity)

    def layout_spec(self) -> LayoutSpec:
        lay = self.layout
        return LayoutSpec(
            layout=lay.kind,
            stop_grad=lay.stop_grad,
            pair_mode=lay.pair_mode,
            combine=lay.combine,
            fa=self.fa_config(),
            projector=self.projector_kind(),
            use_ema=lay.kind == "ByolFa",
            temperature=lay.temperature,
            symmetric_negatives=lay.symmetric_negatives,
            byol_symmetric=lay.byol_symmetric,
        )

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(
            o.base_lr,
            o.momentum,
            o.weight_decay,
            o.lars,
            o.lars_trust_coef,
            o.lars_eps,
            self.clip_norm(),
            o.accum_steps,
            o.warmup_epochs,
            o.total_epochs,
        )

    def clip_norm(self) -> float:
        if self.optim.clip_norm >= 0:
            return self.optim.clip_norm
        return 0.0 if self.layout.kind == "ByolFa" else 1.0

    def ema_config(self) -> EmaConfig:
        return EmaConfig(self.ema.m_base)

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            d.n_clusters, d.latent_dim, d.input_dim, d.samples_per_cluster, d.spread, d.projection_seed, d.gain,
            d.activation,
        )

    def vector_aug(self) -> VectorAugConfig:
        a = self.aug
        return VectorAugConfig(a.noise_sigma, a.mask_rate, a.scale_low, a.scale_high)

    def copy(self, overrides: dict[str, object] | None = None) -> "RunConfig":
        """Deep copy with ``{"section.key": value}`` overrides applied and validated."""
        out = parse_config(dump_config(self))
        for key, value in (overrides or {}).items():
            _assign(out, key, value if isinstance(value, str) else _format_value(value))
        validate(out)
        return out


# ---------------------------------------------------------------- parsing


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            inner = typing.get_args(typ)[0]
            if not raw:
                return ()
            return tuple(_parse_value(p, inner, key) for p in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _assign(cfg: RunConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigError(f"key {key!r} must have the form section.key")
    section, name = key.split(".", 1)
    sec_fields = {f.name: f for f in fields(RunConfig)}
    if section not in sec_fields:
        raise ConfigError(f"unknown section {section!r}")
    sec = getattr(cfg, section)
    hints = typing.get_type_hints(type(sec))
    if name not in hints:
        raise ConfigError(f"unknown key {key!r}")
    setattr(sec, name, _parse_value(raw, hints[name], key))


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            _assign(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec in fields(RunConfig):
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    validate(cfg)
    return cfg


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig) -> None:
    """Raise :class:`ConfigError` on any inconsistent or out-of-range setting."""
    d, m, o = cfg.data, cfg.model, cfg.optim
    _check(d.kind in ("synthetic", "cifar10"), f"data.kind must be synthetic or cifar10, got {d.kind!r}")
    _check(d.kind != "cifar10" or bool(d.cifar_dir), "data.cifar_dir is required for cifar10")
    _check(d.activation in ("sin", "tanh"), "data.activation must be sin or tanh")
    _check(d.cifar_records_per_file >= 0, "data.cifar_records_per_file must be >= 0")
    _check(cfg.layout.kind in LAYOUTS, f"layout.kind must be one of {LAYOUTS}")
    _check(cfg.layout.pair_mode in PAIR_MODES, f"layout.pair_mode must be one of {PAIR_MODES}")
    _check(cfg.layout.combine in COMBINE_MODES, f"layout.combine must be one of {COMBINE_MODES}")
    _check(cfg.fa.method in METHODS, f"fa.method must be one of {METHODS}")
    _check(cfg.aug.setting in SETTINGS, f"aug.setting must be one of {SETTINGS}")
    _check(m.projector in ("", "weak", "strong", "byol"), "model.projector must be weak, strong or byol")
    _check(len(m.conv_channels) == 3, "model.conv_channels needs three entries")
    _check(
        min(m.embedding_dim, m.encoder_hidden, m.projector_hidden, m.predictor_hidden) > 0, "model widths must be > 0"
    )
    _check(o.steps_per_epoch > 0 and o.batch_size > 1, "optim.steps_per_epoch > 0 and optim.batch_size > 1 required")
    _check(cfg.train.precision in ("float32", "float64"), "train.precision must be float32 or float64")
    _check(cfg.train.checkpoint_every >= 0, "train.checkpoint_every must be >= 0")
    p = cfg.probe
    _check(p.epochs > 0 and p.batch_size > 0 and p.lr > 0 and p.knn_k > 0, "probe settings must be positive")
    _check(all(0 < x <= p.epochs for x in p.milestones), "probe.milestones must lie within the probe epochs")
    _check(cfg.ablate.steps >= 0 and len(cfg.ablate.seeds) > 0, "ablate.steps >= 0 and at least one seed")
    _check(cfg.fa.bank_warmup >= 0, "fa.bank_warmup must be >= 0")
    try:
        cfg.layout_spec()
        cfg.optim_config()
        cfg.ema_config()
        cfg.vector_aug()
        if d.kind == "synthetic":
            cfg.synthetic_spec()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.fa.method in ("nn", "nn_noise"):
        _check(cfg.fa.k <= cfg.fa.bank_capacity, "fa.k cannot exceed the bank capacity")

