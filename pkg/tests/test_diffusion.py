import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmps import diffusion as dl
from dmps.latent_graph import ConfigError
from dmps.model import message_passing_step


def random_stochastic(rng, n, low=0.05):
    a = rng.uniform(low, 1.0, size=(n, n))
    return a / a.sum(axis=1, keepdims=True)


def power_iteration_left(w, iters=20_000):
    """Stationary row vector via repeated multiplication by W^T."""
    pi = np.ones(w.shape[0]) / w.shape[0]
    for _ in range(iters):
        pi = w.T @ pi
        pi /= pi.sum()
    return pi


def test_energy_examples(rng):
    g = dl.WeightedGraph(np.array([[0.0, 0.5], [0.5, 0.0]]))
    assert dl.dirichlet_energy(np.array([[0.0], [2.0]]), g) == pytest.approx(1.0, rel=1e-15)
    assert dl.dirichlet_energy(np.ones((2, 3)), g) == 0.0
    x = rng.normal(size=(2, 3))
    assert dl.dirichlet_energy(2 * x, g) == pytest.approx(4 * dl.dirichlet_energy(x, g), rel=1e-14)


def test_energy_counts_each_edge_once():
    w = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 2.0], [0.0, 2.0, 0.0]])
    x = np.array([[0.0], [1.0], [3.0]])
    g = dl.WeightedGraph(w, C=3.0)
    assert dl.dirichlet_energy(x, g) == pytest.approx(1.5 * (1 * 1 + 2 * 4))


def test_weighted_graph_validation():
    with pytest.raises(ValueError):
        dl.WeightedGraph(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        dl.WeightedGraph(-np.ones((2, 2)))
    with pytest.raises(ValueError):
        dl.WeightedGraph(np.zeros((2, 2)), C=0.0)


def test_step_examples(rng):
    u = np.full((2, 2), 0.5)
    np.testing.assert_array_equal(dl.diffusion_step(np.array([[0.0], [2.0]]), u, 0.5), [[0.5], [1.5]])
    for s in (0.0, -0.2, 1.1):
        with pytest.raises(ConfigError):
            dl.diffusion_step(np.zeros((2, 1)), u, s)


def test_unit_step_is_message_passing_bitwise(rng):
    for _ in range(50):
        n = int(rng.integers(1, 9))
        w = random_stochastic(rng, n)
        x = rng.normal(size=(n, 3))
        assert np.array_equal(dl.diffusion_step(x, w, 1.0), message_passing_step(w, x).data)


def test_uniform_graph_converges_in_one_step():
    x0 = np.array([[0.0, 1.0], [2.0, 5.0], [4.0, 0.0]])
    tr = dl.simulate_to_steady_state(x0, np.full((3, 3), 1 / 3))
    assert tr.converged and tr.steps == 1
    np.testing.assert_allclose(tr.final, np.tile(x0.mean(axis=0), (3, 1)), rtol=1e-15)


def test_identity_graph_never_converges():
    tr = dl.simulate_to_steady_state(np.array([[0.0], [1.0]]), np.eye(2), max_steps=25)
    assert not tr.converged and tr.steps == 25
    assert len(tr.energies) == len(tr.oscillations) == 26


def test_steady_state_matches_power_iteration(rng):
    for _ in range(20):
        w = random_stochastic(rng, 5)
        x0 = rng.normal(size=(5, 2))
        tr = dl.simulate_to_steady_state(x0, w, s=float(rng.uniform(0.3, 1.0)), tol=1e-10)
        assert tr.converged
        target = power_iteration_left(w) @ x0
        assert np.abs(tr.final - target).max() < 1e-6


def test_oscillation_examples():
    assert dl.oscillation_index(np.ones((3, 2))) == 0.0
    assert dl.oscillation_index(np.array([[0.0], [2.0]])) == 2.0
    y = dl.diffusion_step(np.array([[0.0], [2.0]]), np.full((2, 2), 0.5), 1.0)
    assert dl.oscillation_index(y) == 0.0


def test_symmetrize_examples(rng):
    g = dl.symmetrize_for_energy_test(np.array([[0.8, 0.2], [0.4, 0.6]]))
    assert g.w[0, 1] == pytest.approx(0.3) and g.w[1, 0] == pytest.approx(0.3)
    assert g.w[0, 0] == 0.0
    s = rng.uniform(size=(4, 4))
    s = s + s.T
    expected = s.copy()
    np.fill_diagonal(expected, 0.0)
    np.testing.assert_array_equal(dl.symmetrize_for_energy_test(s).w, expected)


def symmetric_stochastic(rng, n):
    w = np.zeros((n, n))
    for a in rng.dirichlet(np.ones(3)):
        p = np.eye(n)[rng.permutation(n)]
        w += a * 0.5 * (p + p.T)
    return w


@given(st.integers(2, 8), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_energy_never_increases(n, s, seed):
    rng = np.random.default_rng(seed)
    w = symmetric_stochastic(rng, n)
    g = dl.symmetrize_for_energy_test(w)
    x = rng.normal(size=(n, 2))
    e = [dl.dirichlet_energy(x, g)]
    for _ in range(15):
        x = dl.diffusion_step(x, w, s)
        e.append(dl.dirichlet_energy(x, g))
    assert (np.diff(e) <= 1e-12 * max(e[0], 1.0)).all()


@given(st.integers(2, 8), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_oscillation_never_grows(n, s, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(n, n))
    a[rng.uniform(size=(n, n)) < 0.5] = 0.0
    a += np.eye(n) * 1e-3
    w = a / a.sum(axis=1, keepdims=True)
    x = rng.normal(size=(n, 1))
    y = dl.diffusion_step(x, w, s)
    assert dl.oscillation_index(y) <= dl.oscillation_index(x) + 1e-12
    if ((1 - s) * np.eye(n) + s * w).min() > 0:
        assert dl.oscillation_index(y) < dl.oscillation_index(x)


@given(st.integers(2, 8), st.floats(0.01, 1.0), st.integers(0, 2**32 - 1))
def test_doubly_stochastic_conserves_mass(n, s, seed):
    rng = np.random.default_rng(seed)
    w = sum(a * np.eye(n)[rng.permutation(n)] for a in rng.dirichlet(np.ones(3)))
    x = rng.normal(size=(n, 3))
    np.testing.assert_allclose(dl.diffusion_step(x, w, s).sum(axis=0), x.sum(axis=0), atol=1e-10)


def test_trace_csv(tmp_path, rng):
    tr = dl.simulate_to_steady_state(rng.normal(size=(4, 2)), random_stochastic(rng, 4), 0.5)
    tr.to_csv(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "step,energy,oscillation" and len(rows) == tr.steps + 2
    assert float(rows[1].split(",")[1]) == tr.energies[0]


def test_is_row_stochastic():
    assert dl.is_row_stochastic(np.full((3, 3), 1 / 3))
    assert not dl.is_row_stochastic(np.ones((2, 2)))
