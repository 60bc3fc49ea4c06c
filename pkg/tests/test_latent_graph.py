import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmps import latent_graph as lg
from dmps.autodiff import ParamStore, Tensor
from dmps.gradcheck import check_gradients
from dmps.latent_graph import ConfigError, KernelConfig, SetLayout


def kernel(seed=0, dims=(3, 8, 4), **kw):
    cfg = KernelConfig(dims=dims, activations=("tanh", "tanh"), **kw)
    params = ParamStore()
    lg.init_kernel_params(params, cfg, np.random.default_rng(seed))
    return params, cfg


def test_kernel_config_validation():
    with pytest.raises(ConfigError):
        KernelConfig(sigma0=0.0)
    with pytest.raises(ConfigError):
        KernelConfig(threshold=1.0)
    with pytest.raises(ConfigError):
        KernelConfig(graph="random")
    with pytest.raises(ConfigError):
        KernelConfig(dims=(3, 4, 5), activations=("tanh",))


def test_sigma_is_reparameterized():
    params, _ = kernel(sigma0=2.5)
    assert params["kernel.log_sigma"].item() == pytest.approx(np.log(2.5))
    assert lg.sigma_value(params) == pytest.approx(2.5)


def test_embed_is_rowwise(rng):
    params, cfg = kernel()
    x = rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    e = lg.embed_elements(x, params, cfg).data
    np.testing.assert_array_equal(lg.embed_elements(x[perm], params, cfg).data, e[perm])
    assert lg.embed_elements(x[:1], params, cfg).shape == (1, 4)


def test_embed_feature_mismatch(rng):
    params, cfg = kernel()
    with pytest.raises(ValueError, match="features"):
        lg.embed_elements(rng.normal(size=(2, 5)), params, cfg)


def test_zero_final_layer_gives_all_ones_kernel(rng):
    params, cfg = kernel()
    params["kernel.mlp.1.weight"].data[:] = 0.0
    params["kernel.mlp.1.bias"].data[:] = 0.0
    g = lg.build_latent_graph(rng.normal(size=(5, 3)), params, cfg)
    np.testing.assert_array_equal(g.K.data, np.ones((5, 5)))
    np.testing.assert_allclose(g.W.data, np.full((5, 5), 0.2), rtol=1e-15)


def test_rbf_hand_example():
    phi = np.array([[0.0, 0.0], [1.0, 1.0]])
    k = lg.rbf_kernel_matrix(phi, 1.0).data
    assert k[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-15)
    assert k[0, 1] == pytest.approx(0.367879, abs=1e-6)
    np.testing.assert_array_equal(np.diag(k), [1.0, 1.0])


def test_rbf_large_sigma_tends_to_ones(rng):
    phi = rng.normal(size=(4, 3))
    k = lg.rbf_kernel_matrix(phi, 1e6).data
    np.testing.assert_allclose(k, np.ones((4, 4)), atol=1e-10)


def test_rbf_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        lg.rbf_kernel_matrix(np.zeros((2, 1)), 0.0)


def test_normalize_examples():
    np.testing.assert_allclose(lg.normalize_to_stochastic(np.ones((3, 3))).data, np.full((3, 3), 1 / 3))
    np.testing.assert_array_equal(lg.normalize_to_stochastic(np.ones((1, 1))).data, [[1.0]])
    row = lg.normalize_to_stochastic(np.array([[1.0, 1.0 + np.log(2.0)]])).data
    np.testing.assert_allclose(row, [[1 / 3, 2 / 3]], rtol=1e-14)


def test_sparsify_examples():
    w = np.array([[0.6, 0.3, 0.1]])
    np.testing.assert_array_equal(lg.threshold_sparsify(w, 0.0).data, w)
    np.testing.assert_allclose(
        lg.threshold_sparsify(np.array([[0.6, 0.3, 0.1], [0.1, 0.6, 0.3], [0.3, 0.1, 0.6]]), 0.2).data[0],
        [2 / 3, 1 / 3, 0.0],
        rtol=1e-15,
    )
    uniform = np.full((3, 3), 1 / 3)
    np.testing.assert_array_equal(lg.threshold_sparsify(uniform, 0.5).data, np.eye(3))


def test_sparsify_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        lg.threshold_sparsify(np.eye(2), 1.0)
    with pytest.raises(ConfigError):
        lg.threshold_sparsify(np.eye(2), -0.1)


def test_duplicate_set_gives_half_weights(rng):
    params, cfg = kernel()
    x = np.repeat(rng.normal(size=(1, 3)), 2, axis=0)
    np.testing.assert_array_equal(lg.build_latent_graph(x, params, cfg).W.data, np.full((2, 2), 0.5))


@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_graph_conjugation_and_stochasticity(n, seed):
    rng = np.random.default_rng(seed)
    params, cfg = kernel(seed % 7)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    g = lg.build_latent_graph(x, params, cfg)
    gp = lg.build_latent_graph(x[perm], params, cfg)
    k, w = g.K.data, g.W.data
    assert np.abs(k[np.ix_(perm, perm)] - gp.K.data).max() < 1e-12
    assert np.abs(w[np.ix_(perm, perm)] - gp.W.data).max() < 1e-12
    assert np.abs(k - k.T).max() < 1e-12
    assert ((k > 0) & (k <= 1)).all() and np.array_equal(np.diag(k), np.ones(n))
    assert (w >= 0).all() and np.abs(w.sum(axis=1) - 1).max() < 1e-9


def test_batched_graph_matches_single_sets(rng):
    params, cfg = kernel()
    sets = [rng.normal(size=(n, 3)) for n in (3, 1, 6, 2)]
    layout = SetLayout.from_sizes([len(s) for s in sets])
    blocks = lg.build_latent_graph(np.vstack(sets), params, cfg, layout).blocks()
    for s, (k, w) in zip(sets, blocks):
        g = lg.build_latent_graph(s, params, cfg)
        np.testing.assert_allclose(k, g.K.data, rtol=0, atol=1e-14)
        np.testing.assert_allclose(w, g.W.data, rtol=0, atol=1e-14)


def test_batched_sparsified_graph_matches_single_sets(rng):
    params, cfg = kernel(threshold=0.15)
    sets = [rng.normal(size=(n, 3)) for n in (4, 2, 5)]
    layout = SetLayout.from_sizes([len(s) for s in sets])
    blocks = lg.build_latent_graph(np.vstack(sets), params, cfg, layout).blocks()
    for s, (_, w) in zip(sets, blocks):
        np.testing.assert_allclose(w, lg.build_latent_graph(s, params, cfg).W.data, atol=1e-14)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_identity_and_uniform_graph_modes(rng):
    params, cfg = kernel()
    x = rng.normal(size=(4, 3))
    eye_cfg = KernelConfig(dims=cfg.dims, activations=cfg.activations, graph="identity")
    uni_cfg = KernelConfig(dims=cfg.dims, activations=cfg.activations, graph="uniform")
    np.testing.assert_array_equal(lg.build_latent_graph(x, params, eye_cfg).W.data, np.eye(4))
    np.testing.assert_allclose(lg.build_latent_graph(x, params, uni_cfg).W.data, np.full((4, 4), 0.25))


def test_graph_gradients(rng):
    params, cfg = kernel()
    x = rng.normal(size=(5, 3))
    probe = rng.normal(size=(5, 5))
    errs = check_gradients(lambda: (lg.build_latent_graph(x, params, cfg).W * probe).sum(), dict(params.items()))
    assert max(errs.values()) < 1e-4, errs


def test_layout_rejects_empty_sets():
    with pytest.raises(lg.EmptySetError):
        SetLayout.from_sizes([2, 0, 3])


def test_layout_indexing():
    layout = SetLayout.from_sizes([2, 3])
    assert layout.n_sets == 2 and layout.n_rows == 5 and not layout.is_single
    np.testing.assert_array_equal(layout.idx[0], [0, 1, 0])
    np.testing.assert_array_equal(layout.idx[3], [2, 3, 4])
    np.testing.assert_array_equal(layout.self_col, [0, 1, 0, 1, 2])
    assert SetLayout.single(4).mask is None
