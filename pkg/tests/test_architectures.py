import numpy as np
import pytest

from feataug import autodiff as ad
from feataug.architectures import LAYOUTS, LayoutSpec, build_models, forward_step, pair_table
from feataug.feature_aug import FaConfig, FeatureBank
from feataug.networks import build_mlp_encoder

import suites


def _spec(layout, **kw):
    kw.setdefault("fa", FaConfig("mask", k=2))
    if layout == "ByolFa":
        kw.setdefault("projector", "byol")
        kw.setdefault("use_ema", True)
    return LayoutSpec(layout, **kw)


def test_pair_tables():
    assert [tuple(p) for p in pair_table(_spec("Basic"))] == [
        ("z", "z+", "original"), ("z", "FA(z+)", "fa"), ("z", "FA(z+)", "fa")
    ]
    assert pair_table(_spec("ParallelPred"))[1][:2] == ("p", "FA(z+)")
    assert pair_table(_spec("PostPred"))[1][:2] == ("FA(p)", "z+")
    assert pair_table(_spec("PrePred"))[1][:2] == ("p_{FA(z)}", "z+")
    assert pair_table(_spec("ByolFa"))[0][:2] == ("p", "zt+")
    assert pair_table(_spec("ParallelPred", pair_mode="FAvsFA"))[1][:2] == ("FA(p)", "FA(z+)")
    assert len(pair_table(_spec("Basic", fa=FaConfig("none")))) == 1


@pytest.mark.parametrize("layout", ["ParallelPred", "PostPred", "PrePred", "ByolFa"])
@pytest.mark.parametrize("method", suites.FA_METHODS)
def test_stop_gradient_gives_exactly_zero_positive_branch_gradient(layout, method):
    assert suites.positive_branch_grad_norm(layout, True, method, seed=0) == 0.0


@pytest.mark.parametrize("layout", ["Basic", "ParallelPred", "PostPred", "PrePred"])
@pytest.mark.parametrize("method", suites.FA_METHODS)
def test_without_stop_gradient_positive_branch_receives_gradient(layout, method):
    assert suites.positive_branch_grad_norm(layout, False, method, seed=1) > 0.0


def test_layout_validation():
    with pytest.raises(ValueError):
        LayoutSpec("Siamese")
    with pytest.raises(ValueError):
        LayoutSpec("ByolFa", use_ema=False)
    with pytest.raises(ValueError):
        LayoutSpec("ByolFa", use_ema=True, stop_grad=False)
    with pytest.raises(ValueError):
        LayoutSpec("ParallelPred", use_ema=True)
    with pytest.raises(ValueError):
        LayoutSpec("PostPred", pair_mode="FAvsFA")
    with pytest.raises(ValueError):
        LayoutSpec("Basic", temperature=0)
    with pytest.raises(ValueError):
        LayoutSpec("Basic", combine="Max")


def test_build_models_parts():
    enc = build_mlp_encoder(6, 8, 4)
    m = build_models(_spec("Basic"), enc, projector_hidden=8, embedding_dim=3, predictor_hidden=4, seed=0)
    assert m.predictor is None and m.target_parts() == {}
    m = build_models(_spec("ByolFa"), enc, projector_hidden=8, embedding_dim=3, predictor_hidden=4, seed=0)
    assert set(m.all_parts()) == {"encoder", "projector", "predictor", "target_encoder", "target_projector"}
    for k, v in m.target_params().items():
        np.testing.assert_array_equal(v.data, m.trainable()[k.replace("target_", "")].data)
        assert v is not m.trainable()[k.replace("target_", "")]


@pytest.mark.parametrize("layout", LAYOUTS)
def test_forward_step_terms_and_bank_push(layout):
    spec = _spec(layout, fa=FaConfig("gaussian_noise", k=3, bank_capacity=32))
    m = build_models(spec, build_mlp_encoder(6, 8, 4), projector_hidden=8, embedding_dim=3, predictor_hidden=4, seed=0)
    bank = FeatureBank(32, 3)
    rng = np.random.default_rng(0)
    out = forward_step(spec, m, rng.normal(size=(5, 6)), rng.normal(size=(5, 6)), bank, rng)
    assert [t.tag for t in out.terms][0] == "original"
    assert len(out.loss_fa) == 3
    assert bank.fill == 5
    np.testing.assert_allclose(out.total.item(), np.mean([t.value.item() for t in out.terms]), rtol=1e-5)
