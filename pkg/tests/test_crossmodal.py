import math

import numpy as np
import pytest

from radcal.crossmodal import (
    RefinerConfig,
    backward,
    cross_attention_layer,
    forward_refine,
    init_params,
    load_params,
    patchify,
    pool_tokens,
    refinement_head,
    save_params,
    sinusoidal_2d,
    softmax_rows,
    tokenize,
)
from radcal.geometry import ExtrinsicTransform, se3_exp
from radcal.gradcheck import crossmodal_gradient_case


def layer_params(d, nq, nk, rng, prefix="layer0.r2i."):
    p = {}
    for name in ("Wq", "Wk", "Wv", "Wo"):
        p[prefix + name] = rng.normal(size=(d, d)) / math.sqrt(d)
    p[prefix + "B"] = rng.normal(size=(nq, nk)) * 0.1
    p[prefix + "ln.g"] = 1 + 0.1 * rng.normal(size=d)
    p[prefix + "ln.b"] = 0.1 * rng.normal(size=d)
    p[prefix + "mlp.W1"] = rng.normal(size=(d, 4 * d)) / math.sqrt(d)
    p[prefix + "mlp.b1"] = 0.1 * rng.normal(size=4 * d)
    p[prefix + "mlp.W2"] = rng.normal(size=(4 * d, d)) / math.sqrt(4 * d)
    p[prefix + "mlp.b2"] = 0.1 * rng.normal(size=d)
    return p


def loop_attention(Xq, Xkv, p, pre):
    """Element-by-element oracle of one attention direction."""
    d = Xq.shape[1]
    Q = Xq @ p[pre + "Wq"]
    K = Xkv @ p[pre + "Wk"]
    V = Xkv @ p[pre + "Wv"]
    out = np.zeros_like(Xq)
    rows = []
    for i in range(len(Xq)):
        s = [sum(Q[i, a] * K[j, a] for a in range(d)) / math.sqrt(d) + p[pre + "B"][i, j] for j in range(len(Xkv))]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        a = [x / sum(e) for x in e]
        rows.append(a)
        z = sum(a[j] * V[j] for j in range(len(Xkv))) @ p[pre + "Wo"]
        mu = z.mean()
        var = ((z - mu) ** 2).mean()
        y = (z - mu) / math.sqrt(var + 1e-5) * p[pre + "ln.g"] + p[pre + "ln.b"]
        h = y @ p[pre + "mlp.W1"] + p[pre + "mlp.b1"]
        g = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h**3)))
        out[i] = Xq[i] + g @ p[pre + "mlp.W2"] + p[pre + "mlp.b2"]
    return out, np.array(rows)


# -- tokens ------------------------------------------------------------------------


def test_token_count_and_grid():
    rng = np.random.default_rng(0)
    ts = tokenize(rng.random((8, 8)), 4, 16, rng.normal(size=(16, 16)), np.zeros(16))
    assert ts.tokens.shape == (4, 16) and ts.grid_shape == (2, 2) and not ts.padded


def test_ragged_map_is_zero_padded():
    p, grid, padded = patchify(np.ones((5, 7)), 4)
    assert grid == (2, 2) and padded
    assert p.sum() == 35.0


def test_zero_map_gives_positional_encoding():
    ts = tokenize(np.zeros((8, 12)), 4, 16, np.ones((16, 16)), np.zeros(16))
    np.testing.assert_array_equal(ts.tokens, sinusoidal_2d(2, 3, 16))


def test_positional_neighbours_differ_only_in_column_bands():
    pe = sinusoidal_2d(3, 4, 16)
    diff = pe[0] != pe[1]  # tokens (0,0) and (0,1)
    assert not diff[:8].any() and diff[8:].any()
    nb = 4
    f = 1.0 / 10000.0 ** (np.arange(nb) / nb)
    np.testing.assert_allclose(pe[1, 8:12], np.sin(f), atol=1e-15)
    np.testing.assert_allclose(pe[1, 12:], np.cos(f), atol=1e-15)


def test_encoding_width_must_divide_by_four():
    with pytest.raises(ValueError):
        sinusoidal_2d(2, 2, 10)


# -- attention ---------------------------------------------------------------------


def test_single_key_attention_weight_is_one():
    rng = np.random.default_rng(1)
    d = 8
    p = layer_params(d, 1, 1, rng) | layer_params(d, 1, 1, rng, "layer0.i2r.")
    _, _, c = cross_attention_layer(rng.normal(size=(1, d)), rng.normal(size=(1, d)), p)
    assert c["r2i"]["A"][0, 0] == 1.0 and c["i2r"]["A"][0, 0] == 1.0


def test_zero_value_and_mlp_gives_residual_identity():
    rng = np.random.default_rng(2)
    d = 8
    p = layer_params(d, 3, 5, rng) | layer_params(d, 5, 3, rng, "layer0.i2r.")
    for k in p:
        if k.endswith(("Wv", "mlp.b1", "mlp.b2", "ln.b")):
            p[k] = np.zeros_like(p[k])
    R, I = rng.normal(size=(3, d)), rng.normal(size=(5, d))
    r, i, _ = cross_attention_layer(R, I, p)
    np.testing.assert_array_equal(r, R)
    np.testing.assert_array_equal(i, I)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    d = 8
    p = layer_params(d, 3, 5, rng) | layer_params(d, 5, 3, rng, "layer0.i2r.")
    R, I = rng.normal(size=(3, d)), rng.normal(size=(5, d))
    r, i, c = cross_attention_layer(R, I, p)
    r_ref, a_ref = loop_attention(R, I, p, "layer0.r2i.")
    i_ref, _ = loop_attention(I, R, p, "layer0.i2r.")
    np.testing.assert_allclose(r, r_ref, atol=1e-10)
    np.testing.assert_allclose(i, i_ref, atol=1e-10)
    np.testing.assert_allclose(c["r2i"]["A"], a_ref, atol=1e-12)
    assert np.abs(c["r2i"]["A"].sum(axis=1) - 1).max() < 1e-6


def test_softmax_handles_large_logits():
    a = softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(a).all() and a[0, 0] == pytest.approx(1.0)


def test_mismatched_widths_raise():
    with pytest.raises(ValueError):
        cross_attention_layer(np.zeros((2, 8)), np.zeros((2, 4)), {})


# -- pooling and head ----------------------------------------------------------------


def test_pooling_examples():
    c = np.array([0.5, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(pool_tokens(np.tile(c, (3, 1)), np.tile(c, (2, 1))), c)
    xr, xi = np.array([[1.0, 2.0]]), np.array([[3.0, -2.0]])
    np.testing.assert_array_equal(pool_tokens(xr, xi), [2.0, 0.0])
    rng = np.random.default_rng(4)
    R, I = rng.normal(size=(5, 6)), rng.normal(size=(7, 6))
    oracle = sum(list(R) + list(I)) / 12
    np.testing.assert_allclose(pool_tokens(R, I), oracle, atol=1e-12)
    with pytest.raises(ValueError):
        pool_tokens(np.zeros((0, 3)), np.zeros((0, 3)))


def test_zero_head_is_identity_half_confidence():
    out = refinement_head(np.ones(16), np.zeros((16, 8)), np.array([1.0, 0, 0, 0, 0, 0, 0, 0]))
    # the norm guard leaves q_w = 1 / (1 + 1e-12)
    np.testing.assert_allclose(out.q, [1, 0, 0, 0], rtol=0, atol=2e-12)
    np.testing.assert_array_equal(out.t, 0)
    assert out.rho == 0.5


def test_confidence_limit_returns_base_transform():
    b = np.array([0.9, 0.1, -0.2, 0.3, 1.0, 2.0, 3.0, -800.0])
    out = refinement_head(np.zeros(4), np.zeros((4, 8)), b)
    assert out.rho < 1e-300
    T0 = se3_exp([0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
    np.testing.assert_allclose(out.apply(T0).as_matrix(), T0.as_matrix(), atol=1e-12)


def test_head_quaternion_is_unit():
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = refinement_head(rng.normal(size=16), rng.normal(size=(16, 8)), rng.normal(size=8))
        assert abs(np.linalg.norm(out.q) - 1) < 1e-9


# -- full model ----------------------------------------------------------------------


def test_zero_configuration_is_identity_refinement():
    cfg = RefinerConfig(d=16, layers=1)
    p = init_params(cfg, scale=0.0)
    rng = np.random.default_rng(6)
    out, _ = forward_refine(rng.random((8, 8)), rng.random((8, 8)), p, cfg)
    np.testing.assert_allclose(out.q, [1, 0, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(out.t, 0)
    T0 = se3_exp([0.3, -0.1, 0.2, 0.05, 0.0, -0.02])
    np.testing.assert_allclose(out.apply(T0).as_matrix(), T0.as_matrix(), atol=1e-14)


def test_scaled_inputs_stay_finite_and_unit():
    cfg = RefinerConfig(d=16, layers=2)
    p = init_params(cfg, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    im, ra = rng.random((8, 8)), rng.random((8, 8))
    a, _ = forward_refine(im, ra, p, cfg)
    b, _ = forward_refine(2 * im, 2 * ra, p, cfg)
    for o in (a, b):
        assert np.isfinite(o.t).all() and abs(np.linalg.norm(o.q) - 1) < 1e-12 and 0 < o.rho < 1


@pytest.mark.parametrize("d,layers", [(16, 1), (16, 2), (32, 1)])
def test_parameter_gradients_match_finite_differences(d, layers):
    err, checks, rowdev = crossmodal_gradient_case(d, layers, np.random.default_rng(d + layers))
    assert err < 1e-3 and rowdev < 1e-6 and checks > 0


def test_confidence_gradient_only():
    cfg = RefinerConfig(d=16)
    p = init_params(cfg, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    im, ra = rng.random((8, 8)), rng.random((8, 8))
    _, cache = forward_refine(im, ra, p, cfg)
    g = backward(cache, p, drho=1.0)
    h = 1e-6
    bp, bm = p["head.b"].copy(), p["head.b"].copy()
    bp[7] += h
    bm[7] -= h
    fd = (forward_refine(im, ra, {**p, "head.b": bp}, cfg)[0].rho - forward_refine(im, ra, {**p, "head.b": bm}, cfg)[0].rho) / (2 * h)
    assert g["head.b"][7] == pytest.approx(fd, rel=1e-6)


def test_width_must_divide_by_four():
    with pytest.raises(ValueError):
        init_params(RefinerConfig(d=18))


def test_param_container_round_trip(tmp_path):
    cfg = RefinerConfig(d=16, layers=2, image_shape=(8, 12), radar_shape=(12, 8))
    p = init_params(cfg, np.random.default_rng(11))
    path = tmp_path / "params.bin"
    save_params(path, p, cfg)
    q, cfg2 = load_params(path)
    assert cfg2 == cfg and set(q) == set(p)
    for k in p:
        np.testing.assert_array_equal(q[k], p[k].astype(np.float32).astype(float))
    assert (tmp_path / "params.bin.json").exists()


def test_param_container_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a container")
    with pytest.raises(ValueError):
        load_params(path)


def test_apply_uses_gated_twist():
    out = refinement_head(np.zeros(2), np.zeros((2, 8)), np.array([1.0, 0, 0, 0, 0.4, 0, 0, 0]))
    T = out.apply(ExtrinsicTransform.identity())
    np.testing.assert_allclose(T.translation, [0.2, 0, 0], atol=1e-15)
