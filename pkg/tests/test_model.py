import numpy as np
import pytest

from spherelift import autodiff as ad
from spherelift.attention import AttentionParams, RoleParams, compute_operators
from spherelift.icosphere import build_hierarchy
from spherelift.lifting import handcrafted_operators, lift_unpool
from spherelift.model import (Network, NetworkConfig, classify_forward, decoder_forward,
                              encoder_forward, init_params, total_loss)
from spherelift.properties import gradient_check


def identity_params(cfg):
    p = init_params(cfg, np.random.default_rng(0))
    for k in p:
        if k.endswith(".W"):
            p[k] = np.eye(*p[k].shape)
        elif k.endswith(".b"):
            p[k] = np.zeros_like(p[k])
    return p


def test_encoder_shapes(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=1, in_channels=3, channels=[3, 8], pooling="lift_adaptive")
    x = rng.uniform(size=(162, 3))
    code, details, cache = encoder_forward(x, cfg, init_params(cfg, rng), h3)
    # level 1 of the icosphere has 42 nodes
    assert code.shape == (42, 8)
    assert len(details) == 1 and details[0].shape == (120, 3)
    assert set(cache) == {2}


def test_downsample_has_no_details(h3, rng):
    cfg = NetworkConfig(max_level=3, min_level=1, channels=[2, 2, 2], pooling="downsample")
    code, details, _ = encoder_forward(rng.uniform(size=(642, 1)), cfg, init_params(cfg, rng), h3)
    assert details == [] and code.shape == (42, 2)


def test_constant_input_identity_conv_zero_details(h3):
    cfg = NetworkConfig(max_level=3, min_level=0, in_channels=2, channels=[2, 2, 2, 2],
                        pooling="lift_handcrafted")
    x = np.full((642, 2), 0.7)
    code, details, _ = encoder_forward(x, cfg, identity_params(cfg), h3)
    assert len(details) == 3
    for d in details:
        assert np.abs(d).max() <= 1e-12
    assert np.allclose(code, 0.7 * 8)


def dense_analysis(ops):
    return np.hstack([np.eye(ops.n_even), ops.U_hat])


def dense_synthesis(ops):
    return np.vstack([np.eye(ops.n_even) - ops.U_hat @ ops.P_hat, ops.P_hat])


def test_identity_blocks_low_pass_dense_oracle(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=0, channels=[1, 1, 1], block="identity",
                        pooling="lift_handcrafted")
    params = init_params(cfg, rng)
    assert params == {}
    x = rng.normal(size=(162, 1))
    code, _, cache = encoder_forward(x, cfg, params, h3)
    out = decoder_forward(code, cache, cfg, params, h3)
    o2, o1 = handcrafted_operators(h3.blocks(2)), handcrafted_operators(h3.blocks(1))
    A = dense_analysis(o1) @ dense_analysis(o2)
    S = dense_synthesis(o2) @ dense_synthesis(o1)
    assert np.allclose(code, A @ x, atol=1e-12)
    assert np.allclose(out, S @ A @ x, atol=1e-12)
    # re-encoding the reconstruction reproduces the code
    code2, _, _ = encoder_forward(out, cfg, params, h3)
    assert np.abs(code2 - code).max() <= 1e-10


def test_zero_code_zero_output(h3, rng):
    for pooling in ("lift_adaptive", "downsample"):
        cfg = NetworkConfig(max_level=3, min_level=1, pooling=pooling)
        params = init_params(cfg, rng)
        _, _, cache = encoder_forward(rng.uniform(size=(642, 1)), cfg, params, h3)
        out = decoder_forward(np.zeros((42, 16)), cache, cfg, params, h3)
        assert out.shape == (642, 1) and np.all(out == 0)


def test_decoder_missing_cache(h3, rng):
    cfg = NetworkConfig(max_level=3, min_level=1)
    with pytest.raises(KeyError):
        decoder_forward(np.zeros((42, 16)), {}, cfg, init_params(cfg, rng), h3)


def test_cached_ops_come_from_prepool_features(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=1, channels=[3, 4], pooling="lift_adaptive")
    params = init_params(cfg, rng)
    for k in params:
        if k.startswith("attn"):
            params[k] = rng.normal(size=params[k].shape)
    net = Network(cfg, h3)
    tape = ad.Tape()
    pv = {k: tape.const(v) for k, v in params.items()}
    x = rng.uniform(size=(1, 162, 1))
    enc = net.encoder(pv, tape.const(x))
    feats = enc.means[0][0].value[0]
    ap = AttentionParams({2: {r: _role(params, 2, r) for r in ("update", "predict")}})
    ops = compute_operators(feats, h3.blocks(2), ap)
    cached = enc.op_cache[2]
    assert np.allclose(cached.update.value[0], ops.update_values, atol=1e-14)
    assert np.allclose(cached.predict.value[0], ops.predict_values, atol=1e-14)
    # decoder path uses exactly those operators with zero detail
    unpooled = net._unpool(2, enc.code, cached).value[0]
    assert np.allclose(unpooled, lift_unpool(enc.code.value[0], ops).values, atol=1e-13)


def _role(params, level, role):

    key = f"attn.L{level}.{role}"
    return RoleParams(params[f"{key}.W0"], params[f"{key}.w1"], params[f"{key}.w2"])


def antipodal_permutation(h, level):
    c = h.coords[level]
    key = {tuple(np.round(v, 9)): i for i, v in enumerate(c)}
    return np.array([key[tuple(np.round(-v, 9) + 0.0)] for v in c])


@pytest.mark.parametrize("pooling", ["lift_adaptive", "lift_handcrafted", "max"])
def test_classifier_automorphism_invariance(h3, rng, pooling):
    perm = antipodal_permutation(h3, 3)
    assert np.array_equal(np.sort(perm), np.arange(642))
    cfg = NetworkConfig(max_level=3, min_level=1, channels=[4, 4, 4], task="classification", n_classes=5,
                        pooling=pooling)
    params = init_params(cfg, rng)
    for k in params:
        params[k] = rng.normal(size=params[k].shape) * 0.5
    x = rng.uniform(size=(642, 2))[:, :1]
    a, _ = classify_forward(x, cfg, params, h3)
    b, _ = classify_forward(x[perm], cfg, params, h3)
    assert a.shape == (5,)
    assert np.allclose(a, b, atol=1e-12)


def test_zero_input_zero_logits(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=1, channels=[3, 3], task="classification", n_classes=7)
    logits, details = classify_forward(np.zeros((162, 1)), cfg, init_params(cfg, rng), h3)
    assert logits.shape == (7,) and np.all(logits == 0)


def test_total_loss_examples():
    tape = ad.Tape()
    x = np.random.default_rng(0).uniform(size=(2, 12, 1))
    out = tape.const(x)
    zero_d = [tape.const(np.zeros((2, 30, 1)))]
    c = tape.const(np.zeros((2, 12, 1)) + x.mean(axis=1, keepdims=True))
    same = [(tape.const(x), c)]
    assert abs(total_loss(out, x, zero_d, same, 0.1, 0.01).total.value) <= 1e-15

    pred = tape.const(np.zeros_like(x))
    d = tape.const(np.random.default_rng(1).normal(size=(2, 30, 1)))
    pure = total_loss(pred, x, [d], same, 0.0, 0.0)
    assert pure.total.value == pure.task.value == np.mean(x**2)

    d2 = np.zeros((1, 4, 1))
    d2[0, :, 0] = [1.0, 1.0, 1.0, 1.0]  # Frobenius norm 2
    one = tape.const(np.zeros((1, 12, 1)))
    terms = total_loss(one, np.zeros((1, 12, 1)), [tape.const(d2)], [], 0.1, 0.0)
    assert abs(terms.total.value - 0.2) <= 1e-15


def test_loss_decomposition(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=0, channels=[2, 3, 3], lam=0.3, gamma=0.05)
    net = Network(cfg, h3)
    tape = ad.Tape()
    pv = {k: tape.const(v) for k, v in init_params(cfg, rng).items()}
    x = rng.uniform(size=(3, 162, 1))
    terms = net.loss(pv, tape.const(x), x)
    v = terms.values()
    assert abs(v["total"] - (v["task"] + 0.3 * v["detail"] + 0.05 * v["mean"])) <= 1e-12


def test_nonfinite_loss():
    tape = ad.Tape()
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        total_loss(tape.const(np.ones((1, 12, 1))), np.ones((1, 12, 1)),
                   [tape.const(np.full((1, 30, 1), 1e200))], [], 1.0, 0.0)


def test_init_attention_starts_at_handcrafted(h3, rng):
    cfg = NetworkConfig(max_level=2, min_level=1, channels=[3, 3], pooling="lift_adaptive")
    params = init_params(cfg, rng)
    assert np.any(params["attn.L2.update.W0"] != 0)
    assert np.all(params["attn.L2.update.w1"] == 0)
    _, _, cache = encoder_forward(rng.uniform(size=(162, 1)), cfg, params, h3)
    ref = handcrafted_operators(h3.blocks(2))
    assert np.allclose(cache[2].update, ref.update_values, atol=1e-15)
    assert np.allclose(cache[2].predict, ref.predict_values, atol=1e-15)


@pytest.mark.parametrize("pooling", ["lift_adaptive", "lift_handcrafted", "downsample", "mean", "max"])
def test_gradients_every_pooling(pooling):
    worst, where = gradient_check("reconstruction", seed=3, pooling=pooling)
    assert worst <= 1e-4, where


def test_gradient_classification_shared_roles(h3):
    worst, where = gradient_check("classification", seed=5)
    assert worst <= 1e-4, where


@pytest.mark.parametrize("kw", [
    dict(min_level=3), dict(channels=[1, 2]), dict(pooling="avg"), dict(task="seg"),
    dict(lam=-1.0), dict(block="identity"), dict(pooling=["mean"]), dict(block="conv"),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NetworkConfig(**{"max_level": 3, "min_level": 1, **kw})


def test_config_round_trip():
    cfg = NetworkConfig(pooling=["mean", "lift_adaptive"], lam=0.5)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({"bogus": 1})


def test_network_rejects_shallow_mesh(rng):

    with pytest.raises(ValueError):
        Network(NetworkConfig(max_level=3, min_level=1), build_hierarchy(2))
    with pytest.raises(ValueError):
        encoder_forward(np.zeros((162, 1)), NetworkConfig(max_level=3, min_level=1), {}, build_hierarchy(3))
