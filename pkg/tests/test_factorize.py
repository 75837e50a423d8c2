import numpy as np
import pytest

from _helpers import TINY, randomize_bn, tiny_model
from tuckersfda.configs import HHAR, MFD, OVERFIT, SSC, SYNTH2, SYNTH2_TASK, TOY_NEGATION
from tuckersfda.data import make_synthetic
from tuckersfda.factorize import (
    RankPolicy, count_macs, count_params, decompose_layer, decompose_model, display,
    efficiency_report, recovery_finetune, reduction_pct, round_half_up,
)
from tuckersfda.layers import Conv1d, FactorizedConv1d, MacCounter
from tuckersfda.model import MASK_PRESETS, build_model
from tuckersfda.tensor import hooi, multi_mode_product, relative_error
from tuckersfda.training import PretrainConfig, evaluate, pretrain

SHIPPED = [SSC, HHAR, MFD, TOY_NEGATION, SYNTH2, OVERFIT]


def test_rank_policy_rule():
    p = RankPolicy(8)
    assert p.ranks("x", 64, 128) == (16, 8)
    assert p.ranks("x", 1, 32) == (4, None)
    assert RankPolicy(8, materialize_input=True).ranks("x", 1, 32) == (4, 1)
    assert RankPolicy(8, input_layer_full_rank=True).ranks("x", 3, 64, first=True) == (8, 3)
    assert RankPolicy((4, 2)).ranks("x", 16, 16) == (4, 8)
    assert RankPolicy(64).ranks("x", 16, 16) == (1, None)
    assert RankPolicy(64, min_rank=2).ranks("x", 16, 16) == (2, None)
    with pytest.raises(ValueError):
        RankPolicy(0).ranks("x", 4, 4)


def test_full_rank_decomposition_is_lossless():
    m = randomize_bn(tiny_model(3), np.random.default_rng(0))
    f = decompose_model(m, RankPolicy(1))
    x = np.random.default_rng(1).normal(size=(5, 2, 24))
    assert np.max(np.abs(f.forward(x)[0] - m.forward(x)[0])) <= 1e-7
    assert all(info["rel_error"] < 1e-10 for info in f.meta["decomposition"].values())
    # RF=1 adds factor matrices on top of an equally sized core
    assert sum(count_params(f).values()) > sum(count_params(m).values())


def test_decomposition_keeps_bn_bias_classifier_and_tags():
    m = randomize_bn(tiny_model(), np.random.default_rng(2))
    f = decompose_model(m, RankPolicy(2))
    for name, v in m.params().items():
        if ".bn." in name or name.startswith("classifier"):
            np.testing.assert_array_equal(f.params()[name], v)
    for name, v in m.buffers().items():
        np.testing.assert_array_equal(f.buffers()[name], v)
    assert f.meta["rank_factor"] == 2


def test_exact_low_rank_kernel_has_zero_error():
    rng = np.random.default_rng(4)
    core = rng.normal(size=(2, 3, 5))
    a = np.linalg.qr(rng.normal(size=(16, 2)))[0]
    b = np.linalg.qr(rng.normal(size=(24, 3)))[0]
    conv = Conv1d("c", 24, 16, 5)
    conv.params["weight"] = multi_mode_product(core, [a, b, None])
    new, err, _ = decompose_layer(conv, RankPolicy(8))
    assert new.ranks == (2, 3)
    assert err <= 1e-10


def test_layer_error_equals_hooi_on_raw_kernel():
    m = tiny_model(5)
    f = decompose_model(m, RankPolicy(2))
    for name, info in f.meta["decomposition"].items():
        w = m.layer(name).params["weight"]
        r_out, r_in = info["ranks"]
        ranks = {0: r_out, 1: r_in} if info["input_mode"] else {0: r_out}
        want = relative_error(w, hooi(w, ranks, modes=tuple(ranks)))
        assert info["rel_error"] == pytest.approx(want, abs=1e-12)


def test_decomposed_layer_is_factorized_and_bias_carried():
    cfg = type(TINY)(**{**TINY.__dict__, "bias": True})
    m = build_model(cfg, 0)
    f = decompose_model(m, RankPolicy(2))
    layer = f.layer("block2.conv")
    assert isinstance(layer, FactorizedConv1d)
    np.testing.assert_array_equal(layer.params["bias"], m.layer("block2.conv").params["bias"])
    assert f.tags()["block2.conv.bias"] == "FACTOR"


def test_decompose_rejects_non_finite():
    m = tiny_model()
    m.layer("block1.conv").params["weight"][0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        decompose_model(m, RankPolicy(2))


def test_skip_list_leaves_layer_dense():
    f = decompose_model(tiny_model(), RankPolicy(2, skip=("block1.conv",)))
    assert isinstance(f.layer("block1.conv"), Conv1d)
    assert "block1.conv" not in f.meta["decomposition"]


# -- accounting ---------------------------------------------------------------------

@pytest.mark.parametrize("cfg", SHIPPED, ids=lambda c: c.name)
@pytest.mark.parametrize("rf", [None, 2, 8])
def test_counts_match_brute_force(cfg, rf):
    m = build_model(cfg, 0)
    if rf is not None:
        m = decompose_model(m, RankPolicy(rf, max_iters=1))
    closed = count_params(m)
    tags = m.tags()
    layer_of = m.param_layer()
    for lname, n in closed.items():
        assert n == sum(v.size for k, v in m.params().items() if layer_of[k] == lname)
    for mask in ("core", "full", "bn"):
        mk = MASK_PRESETS[mask]
        want = sum(v.size for k, v in m.params().items()
                   if tags[k] in mk.expanded() and m.section_of(layer_of[k]) == "backbone")
        assert sum(count_params(m, mk).values()) == want
    counter = MacCounter()
    m.forward(np.zeros((1,) + m.input_shape), counter=counter)
    macs = count_macs(m)
    assert {k: v for k, v in counter.by_layer.items() if k in macs} == {k: v for k, v in macs.items() if v}


def test_ssc_undecomposed_totals():
    r = efficiency_report(build_model(SSC)).summary()
    assert (r["params_full_K"], r["macs_full_M"]) == (83.17, 12.92)
    t = efficiency_report(build_model(SSC)).totals
    assert t["params_full"] == 83168 and t["macs_full"] == 12917376


@pytest.mark.parametrize("rf,macs,mac_red,params,param_red", [
    (2, 5.54, 57.12, 20.88, 74.89),
    (4, 1.99, 84.60, 5.32, 93.60),
    (8, 0.80, 93.81, 1.38, 98.34),
])
def test_ssc_efficiency_columns(rf, macs, mac_red, params, param_red):
    m = build_model(SSC)
    s = efficiency_report(m, decompose_model(m, RankPolicy(rf, max_iters=1))).summary()
    assert (s["macs_fact_M"], s["mac_reduction_pct"]) == (macs, mac_red)
    assert (s["params_finetunable_K"], s["param_reduction_pct"]) == (params, param_red)


@pytest.mark.parametrize("cfg,totals,rows", [
    (HHAR, (198.21, 9.04), {2: (3.79, 49.63), 4: (1.34, 12.53), 8: (0.53, 3.19)}),
    (MFD, (199.3, 58.18), {2: (24.66, 50.18), 4: (8.80, 12.8), 8: (3.52, 3.33)}),
], ids=["hhar", "mfd"])
def test_hhar_mfd_efficiency_rows(cfg, totals, rows):
    m = build_model(cfg)
    base = efficiency_report(m).summary()
    assert (base["params_full_K"], base["macs_full_M"]) == totals
    for rf, (macs, params) in rows.items():
        f = decompose_model(m, RankPolicy(rf, input_layer_full_rank=True, max_iters=1))
        s = efficiency_report(m, f).summary()
        assert (s["macs_fact_M"], s["params_finetunable_K"]) == (macs, params)


def test_bn_only_budget():
    assert display(sum(count_params(build_model(SSC), MASK_PRESETS["bn"]).values()), 1e3) == 0.45
    assert display(sum(count_params(build_model(HHAR), MASK_PRESETS["bn"]).values()), 1e3) == 0.64


def test_rounding_helpers():
    assert round_half_up(0.125) == 0.13
    assert round_half_up(2.675) == 2.68
    assert display(1380, 1e3) == 1.38
    assert reduction_pct(1380, 83168, 1e3) == 98.34


def test_report_writers(tmp_path):
    m = tiny_model()
    rep = efficiency_report(m, decompose_model(m, RankPolicy(2)))
    rep.to_csv(tmp_path / "r.csv")
    rep.to_json(tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("layer,kind") and lines[-1].startswith("total")
    assert len(lines) == len(rep.rows) + 2


def test_recovery_never_lowers_source_accuracy():
    pair = make_synthetic(SYNTH2_TASK, 0)
    m, _ = pretrain(build_model(SYNTH2, 0), pair.source, PretrainConfig(epochs=3, seed=0))
    f = decompose_model(m, RankPolicy(8))
    before = evaluate(f, pair.source)["acc"]
    r, log = recovery_finetune(f, pair.source, epochs=2, seed=0)
    assert evaluate(r, pair.source)["acc"] >= before
    frozen = [k for k, t in f.tags().items() if t in ("BN", "CLASSIFIER")]
    for k in frozen:
        np.testing.assert_array_equal(r.params()[k], f.params()[k])
    r0, log0 = recovery_finetune(f, pair.source, epochs=0)
    assert log0 == []
    with pytest.raises(ValueError):
        recovery_finetune(f, pair.source.subset([]), epochs=1)


def test_reduction_of_tiny_counts_uses_raw_values():
    assert reduction_pct(1654, 2904, 1e6) == round_half_up(100 * (1 - 1654 / 2904))
    assert reduction_pct(0, 0, 1e6) == 0.0
    # only the new count rounds to zero
    assert reduction_pct(1654, 29040, 1e6) == round_half_up(100 * (1 - 1654 / 29040))
    assert reduction_pct(0, 29040, 1e6) == 100.0
