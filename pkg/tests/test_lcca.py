import numpy as np
import pytest

from lccan import core as C
from lccan import lcca as L
from lccan.gradcheck import grad_check


def dense_kernel(w1, w2):
    """Sparse-equivalent dense 4D kernel [o,c,k,k,k,k]."""
    o, c, k, _ = w1.shape
    m = k // 2
    W = np.zeros((o, c, k, k, k, k))
    W[:, :, :, :, m, m] += w1
    W[:, :, m, m, :, :] += w2
    return W


def dense_conv4d(x, W):
    """Zero-padded dense 4D cross-correlation summing every kernel tap."""
    cin, h, w, hs, ws = x.shape
    o, _, k = W.shape[:3]
    m = k // 2
    xp = np.pad(x, ((0, 0),) + ((m, m),) * 4)
    out = np.zeros((o, h, w, hs, ws))
    for oo in range(o):
        for c in range(cin):
            for p in range(k):
                for q in range(k):
                    for r in range(k):
                        for s in range(k):
                            out[oo] += W[oo, c, p, q, r, s] * xp[c, p:p + h, q:q + w, r:r + hs, s:s + ws]
    return out


def identity_pivot(c_out, c_in, k=3):
    w = np.zeros((c_out, c_in, k, k))
    for i in range(min(c_out, c_in)):
        w[i, i, k // 2, k // 2] = 1
    return w


def f64(a, grad=False):
    return C.tensor(a, requires_grad=grad, dtype=np.float64)


def lsa_p(rng, c, zero_v=False, dtype=np.float64):
    p = {k: f64(rng.standard_normal((c, c)) * 0.5, True) for k in ("wq", "wk", "wv", "g_w")}
    p["g_b"] = f64(np.zeros(c), True)
    if zero_v:
        p["wv"] = f64(np.zeros((c, c)), True)
    return p


# ---------------------------------------------------------------- LSA

def test_lsa_zero_value_path_is_identity():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 5, 5))
    out = L.local_self_attention(f64(f), lsa_p(rng, 4, zero_v=True))
    assert np.array_equal(out.data, f)


def test_lsa_singleton_neighborhood():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((3, 1, 1))
    p = lsa_p(rng, 3)
    out = L.local_self_attention(f64(f), p)
    v = p["wv"].data @ f[:, 0, 0]
    expected = f[:, 0, 0] + p["g_w"].data @ v
    assert np.allclose(out.data[:, 0, 0], expected, atol=1e-12)


def test_lsa_weights_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(5):
        attn, _ = L.lsa_attention(f64(rng.standard_normal((6, 8, 8))), lsa_p(rng, 6))
        assert np.abs(attn.data.sum(axis=0) - 1).max() <= 1e-6
        # out-of-map neighbors get nothing
        assert np.all(attn.data[~C.neighborhood_mask(8, 8, 3)] == 0)


def test_lsa_matches_direct_loop():
    rng = np.random.default_rng(3)
    c, h, w = 3, 4, 5
    f = rng.standard_normal((c, h, w))
    p = lsa_p(rng, c)
    P = {k: v.data for k, v in p.items()}
    out = L.local_self_attention(f64(f), p).data
    for i in range(h):
        for j in range(w):
            q = P["wq"] @ f[:, i, j]
            nb = [(a, b) for a in range(i - 1, i + 2) for b in range(j - 1, j + 2) if 0 <= a < h and 0 <= b < w]
            logits = np.array([q @ (P["wk"] @ f[:, a, b]) for a, b in nb])
            wts = np.exp(logits - logits.max())
            wts /= wts.sum()
            agg = sum(wt * (P["wv"] @ f[:, a, b]) for wt, (a, b) in zip(wts, nb))
            assert np.allclose(out[:, i, j], f[:, i, j] + P["g_w"] @ agg, atol=1e-10)


def test_lsa_param_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        L.local_self_attention(f64(rng.standard_normal((4, 3, 3))), lsa_p(rng, 5))


# ---------------------------------------------------------------- correlation

def test_correlation_self_diagonal():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((6, 4, 4))
    corr = L.correlation_map(f64(f), f64(f)).data
    for i in range(4):
        for j in range(4):
            assert corr[i, j, i, j] == pytest.approx(1.0, abs=1e-12)
    assert corr.min() >= -1 - 1e-12 and corr.max() <= 1 + 1e-12


def test_correlation_orthogonal():
    fq = np.zeros((2, 1, 1)); fq[0] = 1
    fs = np.zeros((2, 1, 1)); fs[1] = 3
    assert L.correlation_map(f64(fq), f64(fs)).data.item() == 0


def test_correlation_zero_vector_guard():
    fq = np.zeros((2, 2, 2)); fq[:, 0, 0] = [1, 0]
    corr = L.correlation_map(f64(fq), f64(np.ones((2, 2, 2)))).data
    assert np.all(corr[1:, :] == 0) and np.all(corr[0, 1] == 0)


def test_correlation_scale_invariance():
    rng = np.random.default_rng(6)
    fq, fs = rng.standard_normal((5, 4, 4)), rng.standard_normal((5, 4, 4))
    a = L.correlation_map(C.tensor(fq), C.tensor(fs)).data
    b = L.correlation_map(C.tensor(fq), C.tensor(5 * fs)).data
    assert np.abs(a - b).max() <= 1e-6


def test_correlation_channel_mismatch():
    with pytest.raises(ValueError):
        L.correlation_map(np.ones((2, 2, 2)), np.ones((3, 2, 2)))


def _pyramid(rng, scale=1.0):
    from lccan.backbone import FEATURE_SHAPES
    return [f64(scale * rng.standard_normal(FEATURE_SHAPES[l])) for l in range(1, 6)]


def test_build_correlation_shapes_and_bounds():
    rng = np.random.default_rng(7)
    pq, ps = _pyramid(rng), _pyramid(rng)
    for layers, n in (((4, 5), 2), ((5,), 1), ((3, 4, 5), 3)):
        cfg = L.AlignConfig(layers=layers)
        params = L.init_params(cfg)
        raw = L.correlation_stack(pq, ps, params, cfg)
        assert raw.shape == (n, 8, 8, 8, 8)
        assert raw.data.min() >= -1 - 1e-6 and raw.data.max() <= 1 + 1e-6
        clamped = L.build_correlation(pq, ps, params, cfg).data
        assert clamped.min() >= 0 and clamped.max() <= 1 + 1e-6


def test_resize4d_identity_at_8():
    x = f64(np.random.default_rng(8).standard_normal((8, 8, 8, 8)))
    assert np.array_equal(L.resize4d(x).data, x.data)


def test_resize4d_from_16():
    x = np.random.default_rng(9).standard_normal((16, 16, 16, 16))
    out = L.resize4d(f64(x)).data
    # half-pixel 16 -> 8 averages pixel pairs in every dim
    avg = x.reshape(8, 2, 8, 2, 8, 2, 8, 2).mean(axis=(1, 3, 5, 7))
    assert np.allclose(out, avg, atol=1e-12)


def test_empty_layers_rejected():
    with pytest.raises(ValueError):
        L.AlignConfig(layers=())


# ---------------------------------------------------------------- center pivot

def test_cp_identity():
    x = np.random.default_rng(10).standard_normal((2, 4, 4, 4, 4))
    out = L.center_pivot_conv4d(f64(x), f64(identity_pivot(2, 2)), f64(np.zeros((2, 2, 3, 3))))
    assert np.array_equal(out.data, x)


def test_cp_shared_center_double():
    x = np.random.default_rng(11).standard_normal((1, 4, 4, 4, 4))
    w = f64(identity_pivot(1, 1))
    assert np.allclose(L.center_pivot_conv4d(f64(x), w, w).data, 2 * x, atol=0)


@pytest.mark.parametrize("seed", range(5))
def test_cp_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    cin = 1 + seed % 2
    x = rng.standard_normal((cin, 6, 6, 6, 6))
    w1, w2 = rng.standard_normal((2, cin, 3, 3)), rng.standard_normal((2, cin, 3, 3))
    out = L.center_pivot_conv4d(f64(x), f64(w1), f64(w2)).data
    assert np.abs(out - dense_conv4d(x, dense_kernel(w1, w2))).max() <= 1e-5


def test_cp_even_kernel():
    with pytest.raises(ValueError):
        L.center_pivot_conv4d(np.zeros((1, 4, 4, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


# ---------------------------------------------------------------- refinement

def test_refine_zero_weights():
    params = {k: f64(np.zeros_like(v.data)) for k, v in L.init_params().items()}
    raw = f64(np.random.default_rng(12).random((2, 8, 8, 8, 8)))
    assert np.all(L.refine_correlation(raw, params).data == 0)


def test_refine_identity_chain():
    params = {k: f64(np.zeros_like(v.data)) for k, v in L.init_params().items()}
    for u, (co, ci) in enumerate(((16, 2), (16, 16), (1, 16)), 1):
        params[f"lcca/corr/unit{u}/w1"] = f64(identity_pivot(co, ci))
    raw = np.random.default_rng(13).random((2, 8, 8, 8, 8))
    assert np.array_equal(L.refine_correlation(f64(raw), params).data, raw[0])


def test_refine_channel_mismatch():
    with pytest.raises(ValueError):
        L.refine_correlation(np.zeros((3, 8, 8, 8, 8)), L.init_params())


@pytest.mark.parametrize("seed", range(5))
def test_refine_gradient(seed):
    rng = np.random.default_rng(seed)
    params = {k: f64(v.data) for k, v in L.init_params(seed=seed).items()}
    raw = f64(rng.random((2, 4, 4, 4, 4)), True)
    rep = grad_check(lambda r: C.mean(L.refine_correlation(r, params)), [raw], tol=1e-5)
    assert rep.passed, rep


# ---------------------------------------------------------------- align / blend

def test_align_constant_map_gives_mean():
    z = np.random.default_rng(14).standard_normal((32, 8, 8))
    out = L.align(f64(np.full((8, 8, 8, 8), 0.3)), f64(z), 10.0).data
    assert np.allclose(out, z.mean(axis=(1, 2))[:, None, None], atol=1e-12)


def test_align_hard_max():
    rng = np.random.default_rng(15)
    # distinct values per row: a permutation of an evenly spaced grid
    corr = np.stack([rng.permutation(np.linspace(0, 1, 64)) for _ in range(64)]).reshape(8, 8, 8, 8)
    z = rng.standard_normal((32, 8, 8))
    out = L.align(f64(corr), f64(z), 1e4).data
    flat = corr.reshape(64, 64)
    zf = z.reshape(32, 64)
    for qi in range(64):
        assert np.abs(out.reshape(32, 64)[:, qi] - zf[:, flat[qi].argmax()]).max() <= 1e-3


def test_align_rows_stochastic():
    corr = np.random.default_rng(16).standard_normal((8, 8, 8, 8))
    w = L.attention_weights(f64(corr), 10.0).data
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-6


def test_align_shape_error():
    with pytest.raises(ValueError):
        L.align(np.zeros((8, 8, 8, 8)), np.zeros((32, 4, 4)), 10.0)


def test_blend_cases():
    zq, za = f64(np.random.default_rng(17).random((32, 8, 8))), f64(np.random.default_rng(18).random((32, 8, 8)))
    assert np.array_equal(L.blend(zq, za, 0.0).data, zq.data)
    assert np.array_equal(L.blend(zq, za, 1.0).data, za.data)
    assert L.blend(f64(1.0), f64(2.0), 0.1).item() == pytest.approx(1.1, abs=1e-12)
    with pytest.raises(ValueError):
        L.blend(zq, f64(np.zeros((32, 4, 4))), 0.5)


# ---------------------------------------------------------------- full path

def _model_and_inputs(seed, cfg=L.AlignConfig()):
    rng = np.random.default_rng(seed)
    with C.precision(np.float64):
        model = L.LCCA.init(cfg, seed=seed)
    return model, _pyramid(rng), _pyramid(rng), f64(rng.random((32, 8, 8))), f64(rng.random((32, 8, 8)))


def test_kshot_single_equals_one_shot():
    model, pq, ps, zs, zq = _model_and_inputs(0)
    one = L.blend(zq, model.attend(pq, ps, zs), model.cfg.gamma).data
    assert one.tobytes() == model.kshot_align(pq, [(ps, zs)], zq).data.tobytes()


def test_kshot_identical_copies():
    model, pq, ps, zs, zq = _model_and_inputs(1)
    one = model.kshot_align(pq, [(ps, zs)], zq).data
    assert np.abs(model.kshot_align(pq, [(ps, zs)] * 3, zq).data - one).max() <= 1e-6


def test_kshot_two_supports_gamma_one():
    model, pq, ps, zs, zq = _model_and_inputs(2)
    rng = np.random.default_rng(99)
    ps2, zs2 = _pyramid(rng), f64(rng.random((32, 8, 8)))
    a1 = model.attend(pq, ps, zs).data
    a2 = model.attend(pq, ps2, zs2).data
    out = model.kshot_align(pq, [(ps, zs), (ps2, zs2)], zq, gamma=1.0).data
    assert np.abs(out - (a1 + a2) / 2).max() <= 1e-12


def test_kshot_empty():
    model, pq, _, _, zq = _model_and_inputs(3)
    with pytest.raises(ValueError):
        model.kshot_align(pq, [], zq)


def test_scale_invariance_end_to_end():
    cfg = L.AlignConfig(use_lsa=False)
    model, pq, ps, zs, zq = _model_and_inputs(4, cfg)
    a = model.attend(pq, ps, zs).data
    ps5 = [C.scale(f, 5.0) for f in ps]
    assert np.abs(model.attend(pq, ps5, zs).data - a).max() <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_full_path_gradient(seed):
    model, pq, ps, zs, zq = _model_and_inputs(seed)
    names = ["lcca/lsa4/wq", "lcca/lsa5/g_w", "lcca/corr/unit1/w2", "lcca/corr/unit3/w1"]
    tensors = [model.params[n] for n in names]

    def path(*ws):
        for n, w in zip(names, ws):
            model.params[n] = w
        return model.kshot_align(pq, [(ps, zs)], zq, gamma=1.0)
    # ~65k ReLU pre-activations sit on this path; a 1e-5 step crosses kinks
    rep = grad_check(path, tensors, tol=1e-4, seed=seed, probes=12, step=1e-7)
    assert rep.passed, rep
