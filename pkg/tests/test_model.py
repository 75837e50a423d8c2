import numpy as np
import pytest

from _helpers import TINY, randomize_bn, tiny_model
from tuckersfda.configs import BACKBONES, HHAR, MFD, SSC, backbone
from tuckersfda.factorize import RankPolicy, decompose_model
from tuckersfda.layers import ADAPTER, BN, CLASSIFIER, CORE, DENSE, FACTOR
from tuckersfda.model import MASK_PRESETS, SGD, Adam, SubspaceMask, build_model, make_optimizer


def test_block_structure_and_feature_dim():
    m = tiny_model()
    kinds = [l.kind for l in m.backbone]
    assert kinds[:4] == ["Conv1d", "BatchNorm1d", "ReLU", "MaxPool1d"]
    assert kinds[-2:] == ["AdaptiveAvgPool1d", "Flatten"]
    assert sum(k == "Conv1d" for k in kinds) == 3
    assert m.feature_dim == 8 * 2
    assert m.classifier[0].params["weight"].shape == (3, 16)


def test_default_channels_follow_mid_and_final():
    assert SSC.block_channels == (32, 64, 128)
    assert HHAR.block_channels == (64, 128, 128)
    assert MFD.block_channels == (64, 128, 128)


def test_build_is_seeded():
    a, b, c = tiny_model(1), tiny_model(1), tiny_model(2)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])
    assert any(not np.array_equal(v, c.params()[k]) for k, v in a.params().items())


def test_tags_on_dense_and_decomposed_models():
    m = tiny_model()
    tags = m.tags()
    assert tags["block1.conv.weight"] == DENSE
    assert tags["block1.bn.weight"] == BN
    assert tags["classifier.fc.weight"] == CLASSIFIER
    f = decompose_model(m, RankPolicy(2))
    ft = f.tags()
    assert ft["block2.conv.core"] == CORE
    assert ft["block2.conv.v1"] == FACTOR and ft["block2.conv.v2"] == FACTOR
    assert DENSE not in ft.values()


def test_masks_select_by_tag():
    f = decompose_model(tiny_model(), RankPolicy(2))
    core = MASK_PRESETS["core"].names(f)
    assert core and all(n.endswith(".core") for n in core)
    full = set(MASK_PRESETS["full"].names(f))
    assert not any(n.startswith("classifier") for n in full)
    assert set(core) < full
    assert MASK_PRESETS["none"].names(f) == []
    bn = MASK_PRESETS["bn"].names(f)
    assert len(bn) == 6


def test_mask_rejects_unknown_tag():
    with pytest.raises(ValueError):
        SubspaceMask({"WEIGHTS"})


def test_forward_shape_and_input_checks():
    m = tiny_model()
    logits, feats, _ = m.forward(np.zeros((5, 2, 24)))
    assert logits.shape == (5, 3) and feats.shape == (5, 16)
    with pytest.raises(ValueError):
        m.forward(np.zeros((5, 3, 24)))
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 24)))
    with pytest.raises(FloatingPointError):
        m.forward(np.full((2, 2, 24), np.nan))


def test_eval_forward_is_deterministic_and_batch_independent():
    m = randomize_bn(tiny_model(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 2, 24))
    full = m.forward(x)[0]
    np.testing.assert_allclose(np.concatenate([m.forward(x[:2])[0], m.forward(x[2:])[0]]), full, atol=1e-12)


def test_state_roundtrip_and_set_param_checks():
    m = tiny_model()
    st = m.state()
    m.set_param("block1.conv.weight", np.zeros_like(st["block1.conv.weight"]))
    assert not np.array_equal(m.params()["block1.conv.weight"], st["block1.conv.weight"])
    m.load_state(st)
    for k, v in st.items():
        np.testing.assert_array_equal(m.state()[k], v)
    with pytest.raises(ValueError):
        m.set_param("block1.conv.weight", np.zeros(3))
    with pytest.raises(KeyError):
        m.set_param("nope.weight", np.zeros(3))


def test_copy_is_deep():
    m = tiny_model()
    c = m.copy()
    c.params()["block1.conv.weight"][...] = 0
    assert np.any(m.params()["block1.conv.weight"] != 0)


def test_imputer_section():
    m = tiny_model(imputer=True)
    assert [l.name for l in m.imputer] == ["imputer.fc1", "imputer.relu", "imputer.fc2"]
    out, _ = m.impute(np.ones((3, 16)))
    assert out.shape == (3, 16)
    with pytest.raises(ValueError):
        tiny_model().impute(np.ones((3, 16)))


def test_backward_returns_zero_for_unreached_params():
    m = tiny_model()
    _, _, cache = m.forward(np.ones((3, 2, 24)), train=True)
    g = m.backward(cache, grad_features=np.ones((3, 16)))
    assert np.all(g["classifier.fc.weight"] == 0)
    assert np.any(g["block1.conv.weight"] != 0)
    with pytest.raises(ValueError):
        m.backward(None, np.ones((3, 3)))


def test_adam_matches_hand_formula():
    m = tiny_model()
    name = "block1.conv.weight"
    w0 = m.params()[name].copy()
    rng = np.random.default_rng(3)
    g1, g2 = rng.normal(size=w0.shape), rng.normal(size=w0.shape)
    opt = Adam(lr=0.01)
    opt.step(m, {name: g1}, [name])
    opt.step(m, {name: g2}, [name])
    b1, b2, eps = 0.9, 0.999, 1e-8
    mm, vv, w = np.zeros_like(w0), np.zeros_like(w0), w0.copy()
    for t, g in enumerate([g1, g2], start=1):
        mm = b1 * mm + (1 - b1) * g
        vv = b2 * vv + (1 - b2) * g * g
        w = w - 0.01 * (mm / (1 - b1 ** t)) / (np.sqrt(vv / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(m.params()[name], w, atol=1e-14)


def test_optimizers_only_touch_enabled_names():
    for opt in (Adam(1e-2), SGD(1e-2)):
        m = tiny_model()
        before = m.state()
        grads = {k: np.ones_like(v) for k, v in m.params().items()}
        upd = opt.step(m, grads, ["block2.conv.weight"])
        assert set(upd) == {"block2.conv.weight"}
        after = m.state()
        for k in before:
            same = np.array_equal(before[k], after[k])
            assert same == (k != "block2.conv.weight"), k


def test_sgd_step_and_unknown_names():
    m = tiny_model()
    w0 = m.params()["classifier.fc.bias"].copy()
    SGD(0.5).step(m, {"classifier.fc.bias": np.ones_like(w0)}, ["classifier.fc.bias"])
    np.testing.assert_array_equal(m.params()["classifier.fc.bias"], w0 - 0.5)
    with pytest.raises(KeyError):
        SGD(0.1).step(m, {}, ["missing"])
    with pytest.raises(ValueError):
        make_optimizer("lbfgs", 0.1)


def test_registry_lookup():
    assert backbone("ssc") is SSC
    assert {"ssc", "hhar", "mfd"} <= set(BACKBONES)
    with pytest.raises(KeyError):
        backbone("imagenet")


def test_unique_layer_names_enforced():
    m = tiny_model()
    with pytest.raises(ValueError):
        type(m)(m.backbone + m.backbone[:1], m.classifier, m.input_shape, m.n_classes)


def test_classifier_output_must_match_classes():
    m = tiny_model()
    with pytest.raises(ValueError):
        type(m)(m.backbone, m.classifier, m.input_shape, 4)


def test_adapter_tag_listed():
    from tuckersfda.peft import AdapterSpec, attach_adapters
    m = attach_adapters(tiny_model(), AdapterSpec("lora", 2))
    assert ADAPTER in set(m.tags().values())
    assert MASK_PRESETS["adapter"].names(m)


def test_build_model_uses_config_padding_and_stride():
    m = build_model(TINY)
    conv = m.layer("block1.conv")
    assert conv.padding == TINY.kernel_size // 2 and conv.stride == TINY.stride
