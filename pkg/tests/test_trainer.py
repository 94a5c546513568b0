import numpy as np
import pytest

from splatcodec.diffmath import ContractError
from splatcodec.model import VARIANTS, SceneModel, distortion, forward
from splatcodec.scene import SynthSpec, synth_targets
from splatcodec.selfcheck import full_loss_probe
from splatcodec.trainer import (CSV_LABELS, ROW_LABELS, DivergenceError, TrainConfig, ablate, evaluate,
                                format_rows, rd_loss, train)


@pytest.fixture(scope="module")
def targets():
    return synth_targets(SynthSpec(n=300, seed=5))


def test_config_validation_names_field():
    for kw, field in (({"lambda_e": -1.0}, "lambda_e"), ({"lambda_m": -1.0}, "lambda_m"),
                      ({"variant": "nope"}, "variant"), ({"iters": -2}, "iters")):
        with pytest.raises(ContractError, match=field):
            TrainConfig(**kw)


def test_config_from_text():
    cfg = TrainConfig.from_text("# rate weight\nlambda_e = 0.002\niters=7  # short\nvariant = predict\n",
                                seed=3)
    assert (cfg.lambda_e, cfg.iters, cfg.variant, cfg.seed) == (0.002, 7, "predict", 3)
    with pytest.raises(ContractError, match="unknown key"):
        TrainConfig.from_text("bogus = 1")


def test_variant_structure(targets):
    b = SceneModel.from_targets(targets, "baseline")
    p = SceneModel.from_targets(targets, "predict")
    h = SceneModel.from_targets(targets, "predict_hyper")
    assert b.fpnet is None and b.icenc is None and b.feat.shape[1] == 32
    assert np.array_equal(b.feat, targets.f.astype(np.float32))
    assert p.fpnet is not None and p.icenc is None and p.density is None
    assert h.icenc is not None and h.density is not None
    assert p.feat.shape[1] == 25 and not p.feat.any()


def test_zero_weights_give_pure_distortion(targets):
    m = SceneModel.from_targets(targets, "predict_hyper", dtype=np.float64)
    rep = rd_loss(m, targets, TrainConfig(lambda_e=0.0, lambda_m=0.0))
    assert rep.total == rep.distortion
    assert rep.distortion >= 0 and rep.rate >= 0 and rep.mask_loss >= 0


def test_distortion_is_sum_of_mean_squared_errors(targets):
    m = SceneModel.from_targets(targets, "baseline", dtype=np.float64)
    st = forward(m, "infer")
    d = distortion(st, targets)
    assert d["feature"] == pytest.approx(np.mean(np.sum((st.fp - targets.f) ** 2, axis=1)))
    assert d["scale"] == pytest.approx(np.mean(np.sum((st.lhat - targets.l) ** 2, axis=1)))


def test_rd_loss_rejects_mismatched_targets(targets):
    m = SceneModel.from_targets(targets, "predict")
    with pytest.raises(ContractError):
        rd_loss(m, targets.subset(np.arange(10)), TrainConfig())


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_loss_gradient_frozen_noise(targets, variant):
    worst, checked = full_loss_probe(targets, variant)
    assert checked >= 5 and worst < 1e-2, (worst, checked)


def test_training_is_deterministic(targets):
    out = []
    for _ in range(2):
        m = SceneModel.from_targets(targets, "predict_hyper", seed=4)
        train(m, targets, TrainConfig(iters=8, seed=4))
        out.append(m.params())
    for k in out[0]:
        assert np.array_equal(out[0][k], out[1][k]), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration(targets):
    m = SceneModel.from_targets(targets, "predict")
    m.scale[0, 0] = np.inf
    with pytest.raises(DivergenceError) as err:
        train(m, targets, TrainConfig(iters=3, variant="predict"))
    assert err.value.iteration == 0


def test_variant_mismatch_rejected(targets):
    with pytest.raises(ContractError):
        train(SceneModel.from_targets(targets, "predict"), targets, TrainConfig(variant="baseline"))


def test_loss_decreases_on_smooth_scene():
    t = synth_targets(SynthSpec(n=5000, seed=1))
    m = SceneModel.from_targets(t, "predict_hyper")
    res = train(m, t, TrainConfig(iters=500, lambda_e=0.004))
    assert res.curve[-1][3] < res.curve[10][3]


def test_higher_lambda_spends_fewer_bits():
    t = synth_targets(SynthSpec(n=1500, seed=1))
    bits = {}
    for lam in (0.004, 0.0005):
        m = SceneModel.from_targets(t, "predict_hyper")
        train(m, t, TrainConfig(iters=200, lambda_e=lam))
        bits[lam] = evaluate(m, t, render=False).total_bits
    assert bits[0.004] < bits[0.0005]


def test_ablation_rows_and_labels(targets):
    rows = ablate(targets, TrainConfig(iters=5), render=False)
    assert [r.label for r in rows] == ["Baseline", "W/ predict", "W/ predict & hyper"]
    for r in rows:
        assert sum(r.bits.values()) == pytest.approx(r.total_bits)
        assert r.coded_bytes > r.feature_bytes > 0
    csv = format_rows(rows, "csv").splitlines()
    assert [ln.split(",")[0] for ln in csv[1:]] == ["Baseline", "W_predict", "W_predict_hyper"]
    assert ROW_LABELS["predict"] == "W/ predict" and CSV_LABELS["predict_hyper"] == "W_predict_hyper"
