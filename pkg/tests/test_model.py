import numpy as np
import pytest
from scipy.special import expit

from gradcheck import check_param_grads
from msgl import autodiff as ad
from msgl import kernels
from msgl.errors import ConfigError, DimensionError
from msgl.model import (THETA, MSGLModel, ModelConfig, cross_scale_interpolate,
                        graph_embed_composed, load_checkpoint, param_group, rgrn_step)


def lstm_step(x, h_prev, c_prev, Wx, Wh, b):
    """Standard gated recurrent (LSTM) step, gate blocks (i, f, o, c~)."""
    h = Wh.shape[0]
    z = x @ Wx + h_prev @ Wh + b
    i, f, o = expit(z[:, :h]), expit(z[:, h:2 * h]), expit(z[:, 2 * h:3 * h])
    c = f * c_prev + i * np.tanh(z[:, 3 * h:])
    return c, o * np.tanh(c)


def toy(rng, T=6, M=2, N=5, F=7, h=8, seed=3, jitter=0.3):
    m = MSGLModel(ModelConfig(n_features=F, hidden=h, seed=seed))
    for p in m.params.values():
        p.data = p.data + jitter * rng.normal(size=p.shape)
    Xc, Xf = rng.normal(size=(T, M, F)), rng.normal(size=(T, N, F))
    Ac = np.zeros((M, M))
    Ac[1, 0] = 1.0
    Af = np.zeros((N, N))
    Af[1, 0], Af[2, 1], Af[2, 3], Af[4, 2] = 1.0, 0.6, 0.4, 1.0
    D = rng.random((N, M)) + 0.1
    D /= D.sum(1, keepdims=True)
    return m, Xc, Xf, Ac, Af, D


def theta_of(m):
    return [m.params[k] for k in THETA]


def test_parameter_groups_disjoint():
    m = MSGLModel(ModelConfig(hidden=8))
    groups = {}
    for k in m.params:
        groups.setdefault(param_group(k), set()).add(k)
    assert set(groups) == {"theta", "c", "cr", "f"}
    assert groups["theta"] == set(THETA)
    assert sum(len(v) for v in groups.values()) == len(m.params)


def test_shapes_follow_config():
    m = MSGLModel(ModelConfig(n_features=5, hidden=12, heads=3))
    assert m.get("Wx").shape == (5, 48) and m.get("Wh").shape == (12, 48)
    assert m.get("cr.W").shape == (24, 1) and m.get("f.Wres").shape == (24, 24)


def test_heads_must_divide_hidden():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=10, heads=4)


def test_rgrn_step_reduces_to_lstm_when_a_is_zero(rng):
    n, F, h = 4, 3, 5
    Wx, Wh, b = rng.normal(size=(F, 4 * h)), rng.normal(size=(h, 4 * h)), rng.normal(size=4 * h)
    Wg, bg = rng.normal(size=(h, h)), rng.normal(size=h)
    x, s, hp = rng.normal(size=(n, F)), rng.normal(size=(n, h)), rng.normal(size=(n, h))
    s1, h1 = rgrn_step(x, s, hp, np.zeros((n, n)), (Wx, Wh, b, Wg, bg))
    c_ref, h_ref = lstm_step(x, hp, s, Wx, Wh, b)
    np.testing.assert_array_equal(s1.data, c_ref)
    np.testing.assert_array_equal(h1.data, h_ref)


def test_rgrn_step_gate_limit(rng):
    n, F, h = 3, 2, 4
    b = np.zeros(4 * h)
    b[:h], b[h:2 * h] = -1e3, 1e3  # input gate shut, forget gate open
    Wx, Wh = np.zeros((F, 4 * h)), np.zeros((h, 4 * h))
    Wg, bg = rng.normal(size=(h, h)), rng.normal(size=h)
    A = np.array([[0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    s = rng.normal(size=(n, h))
    with ad.strict(False):
        s1, _ = rgrn_step(rng.normal(size=(n, F)), s, np.zeros((n, h)), A, (Wx, Wh, b, Wg, bg))
    np.testing.assert_allclose(s1.data, s + A @ np.tanh(s @ Wg + bg), atol=1e-12)


def test_rgrn_step_shape_error(rng):
    with pytest.raises(DimensionError):
        rgrn_step(np.zeros((3, 2)), np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((3, 3)),
                  (np.zeros((2, 16)), np.zeros((4, 16)), np.zeros(16), np.zeros((4, 4)), np.zeros(4)))


def test_rgrn_step_gradients(rng):
    n, F, h = 3, 2, 3
    th = [ad.Tensor(rng.normal(size=s) * 0.5, requires_grad=True, name=k) for k, s in
          zip(THETA, [(F, 4 * h), (h, 4 * h), (4 * h,), (h, h), (h,)])]
    x, s, hp = rng.normal(size=(n, F)), rng.normal(size=(n, h)), rng.normal(size=(n, h))
    A = np.array([[0, 0, 0], [1.0, 0, 0], [0.5, 0.5, 0]])

    def loss():
        s1, h1 = rgrn_step(x, s, hp, A, th)
        return ad.add(ad.sum(s1), ad.sum(h1))

    assert max(check_param_grads(loss, th).values()) < 1e-4


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_fused_embed_matches_composed(rng, backend):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    with kernels.use_backend(backend):
        H1 = m.graph_embed(Xf, Af).data
    H0 = graph_embed_composed(Xf, Af, theta_of(m)).data
    np.testing.assert_allclose(H1, H0, rtol=0, atol=1e-12)


def test_graph_embed_single_step(rng):
    m, Xc, Xf, Ac, Af, D = toy(rng, T=1)
    h = m.config.hidden
    z = np.zeros((Xf.shape[1], h))
    _, h1 = rgrn_step(Xf[0], z, z, Af, theta_of(m))
    np.testing.assert_allclose(m.graph_embed(Xf, Af).data[0], h1.data, atol=1e-14)


def test_graph_embed_contracts_on_constant_input(rng):
    m = MSGLModel(ModelConfig(n_features=3, hidden=8, seed=2))
    for k in THETA:
        m.params[k].data *= 0.3
    X = np.repeat(rng.normal(size=(1, 4, 3)), 80, axis=0)
    A = np.zeros((4, 4))
    A[1, 0] = A[2, 1] = A[3, 2] = 1.0
    H = m.graph_embed(X, A).data
    d = np.abs(np.diff(H, axis=0)).max(axis=(1, 2))
    assert d[-1] < 1e-6 and d[-1] < d[5]


def test_default_embedding_shape(rng):
    m = MSGLModel()
    assert m.graph_embed(rng.normal(size=(3, 2, 7)), np.zeros((2, 2))).shape == (3, 2, 64)


def test_graph_embed_rejects_bad_shapes(rng):
    m = MSGLModel(ModelConfig(hidden=4))
    with pytest.raises(DimensionError):
        m.graph_embed(np.zeros((3, 2, 6)), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        m.graph_embed(np.zeros((3, 2, 7)), np.zeros((3, 3)))


def test_csl_head_affine_identity(rng):
    m = MSGLModel(ModelConfig(hidden=8))
    m.set("c.W", np.zeros((8, 1)))
    m.set("c.b", [2.5])
    out = m.csl_head(rng.normal(size=(4, 3, 8)))
    assert out.shape == (4, 3)
    np.testing.assert_array_equal(out.data, 2.5)


def test_cross_scale_interpolate_cases(rng):
    Hc = rng.normal(size=(3, 4, 5))
    onehot = np.eye(4)[[2, 0, 0, 3, 1, 2]]
    np.testing.assert_array_equal(cross_scale_interpolate(Hc, onehot).data, Hc[:, [2, 0, 0, 3, 1, 2]])
    v = rng.normal(size=5)
    D = rng.random((6, 4))
    D /= D.sum(1, keepdims=True)
    const = np.broadcast_to(v, (3, 4, 5))
    np.testing.assert_allclose(cross_scale_interpolate(const, D).data, np.broadcast_to(v, (3, 6, 5)))
    out = cross_scale_interpolate(Hc, D).data
    ref = np.zeros((3, 6, 5))
    for t in range(3):
        for i in range(6):
            for k in range(5):
                ref[t, i, k] = sum(D[i, j] * Hc[t, j, k] for j in range(4))
    np.testing.assert_allclose(out, ref, rtol=1e-13)
    with pytest.raises(DimensionError):
        cross_scale_interpolate(Hc, np.ones((6, 3)))


def test_attention_single_node_is_value_projection(rng):
    m, *_ = toy(rng)
    H = rng.normal(size=(3, 1, 8))
    p = m.params
    V = H @ p["cr.Wv"].data + p["cr.bv"].data
    np.testing.assert_allclose(m.attention(H).data, V @ p["cr.Wo"].data + p["cr.bo"].data, atol=1e-13)


def test_crsl_permutation_equivariance(rng):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    Hc = m.graph_embed(Xc, Ac)
    perm = rng.permutation(D.shape[0])
    y = m.crsl_head(cross_scale_interpolate(Hc, D)).data
    yp = m.crsl_head(cross_scale_interpolate(Hc, D[perm])).data
    np.testing.assert_allclose(yp, y[:, perm], atol=1e-12)


def test_grouped_attention_equals_separate_windows(rng):
    m, *_ = toy(rng)
    H1, H2 = rng.normal(size=(4, 5, 8)), rng.normal(size=(4, 5, 8))
    both = m.attention(np.concatenate([H1, H2], axis=1), groups=2).data
    np.testing.assert_allclose(both[:, :5], m.attention(H1).data, atol=1e-13)
    np.testing.assert_allclose(both[:, 5:], m.attention(H2).data, atol=1e-13)


def test_fsl_zero_residual_is_identity(rng):
    m = MSGLModel(ModelConfig(hidden=4))
    m.set("f.Wres", np.zeros((8, 8)))
    m.set("f.bres", np.zeros(8))
    m.bn["f"].running_var[:] = 1.0 - 1e-5  # eval batchnorm becomes the identity
    W = rng.normal(size=(8, 1))
    m.set("f.W", W)
    Hf, Hcr = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    out = m.fsl_head(Hf, Hcr)
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out.data, (np.concatenate([Hf, Hcr], -1) @ W)[..., 0], atol=1e-12)
    with pytest.raises(DimensionError):
        m.fsl_head(Hf, Hcr[:, :1])


def test_fsl_mode_is_single_scale_baseline(rng):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    out = m.forward(Xc, Xf, Ac, Af, D, tasks=("f",), cross=False)["f"].data
    Hf = graph_embed_composed(Xf, Af, theta_of(m)).data
    ref = m.fsl_head(Hf, np.zeros_like(Hf)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_all_task_gradients_match_fd(rng):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    T, M, N = 6, 2, 5
    Yc, Yf = rng.normal(size=(T, M)), rng.normal(size=(T, N))
    mk = rng.random((T, N)) < 0.6
    for task in ("c", "cr", "f"):
        def loss(task=task):
            out = m.forward(Xc, Xf, Ac, Af, D, training=False)
            target, mask = (Yc, np.ones((T, M), bool)) if task == "c" else (Yf, mk)
            return ad.masked_mse(out[task], target, mask)

        worst = check_param_grads(loss, list(m.params.values()))
        assert max(worst.values()) < 1e-4, (task, worst)


def test_training_mode_needs_rng(rng):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    with pytest.raises(Exception):
        m.forward(Xc, Xf, Ac, Af, D, training=True)


def test_state_roundtrip_and_copy(rng, tmp_path):
    m, Xc, Xf, Ac, Af, D = toy(rng)
    m.forward(Xc, Xf, Ac, Af, D, training=True, rng=np.random.default_rng(0))
    m.save(tmp_path / "a.npz", {"note": "x"})
    m.save(tmp_path / "b.npz", {"note": "x"})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    m2, meta = load_checkpoint(tmp_path / "a.npz")
    assert meta == {"note": "x"}
    for k, v in m.state().items():
        np.testing.assert_array_equal(m2.state()[k], v)
    c = m.copy()
    c.params["Wx"].data += 1
    assert not np.array_equal(c.get("Wx"), m.get("Wx"))
