"""Wiring of encoder, projector, predictor, FA and losses into training layouts.

Layouts:

* ``Basic``        - pairs (z, z+) and (z, FA(z+)); no predictor.
* ``ParallelPred`` - predictor on the anchor, FA on the positive: (p, z+), (p, FA(z+)).
* ``PostPred``     - FA after the predictor: (p, z+), (FA(p), z+).
* ``PrePred``      - FA before the predictor: (p, z+), (pred(FA(z)), z+).
* ``ByolFa``       - online prediction vs. EMA target projection, FA on the target side,
  scored with the BYOL similarity loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from feataug import autodiff as ad
from feataug.autodiff import Tensor
from feataug.feature_aug import FaConfig, FeatureBank, apply_fa
from feataug.losses import COMBINE_MODES, LossTerm, byol_similarity, combine, info_nce
from feataug.networks import Network, NetSpec, build_predictor, build_projector

LAYOUTS = ("Basic", "ParallelPred", "PostPred", "PrePred", "ByolFa")
PAIR_MODES = ("OrigVsFA", "FAvsFA")


@dataclass(frozen=True)
class LayoutSpec:
    layout: str = "ParallelPred"
    stop_grad: bool = True
    pair_mode: str = "OrigVsFA"
    combine: str = "Average"
    fa: FaConfig = field(default_factory=FaConfig)
    projector: str = "strong"
    use_ema: bool = False
    temperature: float = 0.2
    symmetric_negatives: bool = False
    byol_symmetric: bool = True

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {LAYOUTS}")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"unknown pair mode {self.pair_mode!r}")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.layout == "ByolFa":
            if not self.use_ema:
                raise ValueError("ByolFa requires use_ema")
            if not self.stop_grad:
                raise ValueError("ByolFa always stops the gradient of the target branch")
        elif self.use_ema:
            raise ValueError("only ByolFa uses an EMA target network")
        if self.pair_mode == "FAvsFA" and self.layout not in ("Basic", "ParallelPred"):
            raise ValueError("FAvsFA pairing is only defined for Basic and ParallelPred")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def has_predictor(self) -> bool:
        return self.layout != "Basic"


@dataclass
class Models:
    encoder: Network
    projector: Network
    predictor: Network | None = None
    target_encoder: Network | None = None
    target_projector: Network | None = None

    def online_parts(self) -> dict[str, Network]:
        parts = {"encoder": self.encoder, "projector": self.projector}
        if self.predictor is not None:
            parts["predictor"] = self.predictor
        return parts

    def target_parts(self) -> dict[str, Network]:
        if self.target_encoder is None:
            return {}
        return {"target_encoder": self.target_encoder, "target_projector": self.target_projector}

    def all_parts(self) -> dict[str, Network]:
        return {**self.online_parts(), **self.target_parts()}

    def trainable(self) -> dict[str, Tensor]:
        """Flat ``part.layer`` -> tensor map of the gradient-trained parameters."""
        return {f"{part}.{k}": v for part, net in self.online_parts().items() for k, v in net.state.params.items()}

    def target_params(self) -> dict[str, Tensor]:
        return {f"{part}.{k}": v for part, net in self.target_parts().items() for k, v in net.state.params.items()}


def build_models(
    spec: LayoutSpec,
    encoder_spec: NetSpec,
    *,
    projector_hidden: int,
    embedding_dim: int,
    predictor_hidden: int,
    seed: int,
    projector_last_bn: bool = True,
    predictor_bn: bool = True,
) -> Models:
    enc_out = encoder_spec.out_dim
    proj_spec = build_projector(spec.projector, enc_out, projector_hidden, embedding_dim, last_bn=projector_last_bn)
    models = Models(Network.create(encoder_spec, seed), Network.create(proj_spec, seed + 1))
    if spec.has_predictor:
        models.predictor = Network.create(
            build_predictor(embedding_dim, predictor_hidden, embedding_dim, batch_norm=predictor_bn), seed + 2
        )
    if spec.use_ema:
        models.target_encoder = Network(encoder_spec, models.encoder.state.copy())
        models.target_projector = Network(proj_spec, models.projector.state.copy())
    return models


class Pair(NamedTuple):
    anchor: str
    positive: str
    kind: str


def pair_table(spec: LayoutSpec) -> list[Pair]:
    """Symbolic list of the contrastive pairs ``spec`` builds, original first."""
    k = spec.fa.k if spec.fa.enabled else 0
    if spec.layout == "ByolFa":
        return [Pair("p", "zt+", "original")] + [Pair("p", "FA(zt+)", "fa")] * k
    pos, fa_pos = "z+", "FA(z+)"
    if spec.layout == "Basic":
        anchor, fa_anchor, fa_positive = "z", "z", fa_pos
    elif spec.layout == "ParallelPred":
        anchor, fa_anchor, fa_positive = "p", "p", fa_pos
    elif spec.layout == "PostPred":
        anchor, fa_anchor, fa_positive = "p", "FA(p)", pos
    else:
        anchor, fa_anchor, fa_positive = "p", "p_{FA(z)}", pos
    if spec.pair_mode == "FAvsFA":
        fa_anchor = f"FA({anchor})"
    return [Pair(anchor, pos, "original")] + [Pair(fa_anchor, fa_positive, "fa")] * k


@dataclass
class StepOutput:
    total: Tensor
    terms: list[LossTerm]
    positive_raw: Tensor  # positive/target branch output before stop-gradient
    bank_features: np.ndarray

    @property
    def loss_original(self) -> float:
        return self.terms[0].value.item()

    @property
    def loss_fa(self) -> list[float]:
        return [t.value.item() for t in self.terms[1:]]


def _average_terms(per_direction: list[list[Tensor]]) -> list[Tensor]:
    n = len(per_direction)
    out = []
    for group in zip(*per_direction):
        total = group[0]
        for g in group[1:]:
            total = ad.add(total, g)
        out.append(ad.scale(total, 1.0 / n) if n > 1 else total)
    return out


def forward_step(
    spec: LayoutSpec,
    models: Models,
    view_a,
    view_p,
    bank: FeatureBank | None,
    rng: np.random.Generator,
    *,
    push: bool = True,
) -> StepOutput:
    """Build the per-step loss graph for ``spec`` on one pair of views."""
    view_a, view_p = ad.as_tensor(view_a), ad.as_tensor(view_p)
    if view_a.shape[0] != view_p.shape[0]:
        raise ValueError("both views need the same batch size")
    if spec.has_predictor and models.predictor is None:
        raise ValueError(f"{spec.layout} needs a predictor")
    if not spec.has_predictor and models.predictor is not None:
        raise ValueError("Basic layout forbids a predictor")
    fa = spec.fa

    if spec.layout == "ByolFa":
        if models.target_encoder is None:
            raise ValueError("ByolFa needs target networks")
        directions = [(view_a, view_p)]
        if spec.byol_symmetric:
            directions.append((view_p, view_a))
        per_dir, first_target = [], None
        for xa, xp in directions:
            pred = models.predictor(models.projector(models.encoder(xa)))
            target = models.target_projector(models.target_encoder(xp, track_stats=False), track_stats=False)
            if first_target is None:
                first_target = target
            zt = ad.stop_gradient(target)
            vals = [byol_similarity(pred, zt)]
            vals += [byol_similarity(pred, f) for f in apply_fa(fa, zt, bank, rng)]
            per_dir.append(vals)
        values = _average_terms(per_dir)
        positive_raw = first_target
    else:
        z = models.projector(models.encoder(view_a))
        positive_raw = models.projector(models.encoder(view_p))
        zp = ad.stop_gradient(positive_raw) if spec.stop_grad else positive_raw
        tau, sym = spec.temperature, spec.symmetric_negatives

        def loss(a, b):
            return info_nce(a, b, tau, symmetric_negatives=sym)

        if spec.layout == "Basic":
            anchor = z
        else:
            anchor = models.predictor(z)
        values = [loss(anchor, zp)]
        if fa.enabled:
            if spec.layout in ("Basic", "ParallelPred"):
                fa_pos = apply_fa(fa, zp, bank, rng, differentiable=not spec.stop_grad)
                if spec.pair_mode == "FAvsFA":
                    fa_anc = apply_fa(fa, anchor, bank, rng, differentiable=True)
                else:
                    fa_anc = [anchor] * len(fa_pos)
                values += [loss(a, f) for a, f in zip(fa_anc, fa_pos)]
            elif spec.layout == "PostPred":
                values += [loss(f, zp) for f in apply_fa(fa, anchor, bank, rng, differentiable=True)]
            else:
                fa_z = apply_fa(fa, z, bank, rng, differentiable=True)
                values += [loss(models.predictor(f, track_stats=False), zp) for f in fa_z]

    terms = [LossTerm("original", values[0])] + [LossTerm(f"fa{j + 1}", v) for j, v in enumerate(values[1:])]
    total = combine(terms, spec.combine)
    feats = positive_raw.data
    if push and bank is not None:
        bank.push(feats)
    return StepOutput(total, terms, positive_raw, feats)
