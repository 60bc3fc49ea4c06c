"""Graph diffusion as repeated averaging.

Each explicit Euler step (1 - s) X + s W X lowers the Dirichlet energy of a
symmetric graph, and iterating to consensus lands on pi^T X0, where pi is the
stationary distribution of W.
"""

import numpy as np

from dmps.diffusion import dirichlet_energy, simulate_to_steady_state, symmetrize_for_energy_test

rng = np.random.default_rng(3)
a = rng.uniform(0.1, 1.0, size=(5, 5))
sym = a + a.T
w = sym / sym.sum(axis=1, keepdims=True)
x0 = rng.normal(size=(5, 2))

trace = simulate_to_steady_state(x0, w, s=0.5, tol=1e-10)
print(f"converged in {trace.steps} steps")
print("energy (first five):", np.round(trace.energies[:5], 4))
print("oscillation (first five):", np.round(trace.oscillations[:5], 4))

# stationary distribution from the left eigenvector for eigenvalue 1
vals, vecs = np.linalg.eig(w.T)
pi = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
pi /= pi.sum()
print("consensus row:", trace.final[0])
print("pi^T X0:      ", pi @ x0)

# a step with s = 1 is exactly one round of message passing
graph = symmetrize_for_energy_test(w)
print("energy after one full step:", dirichlet_energy(w @ x0, graph), "<", dirichlet_energy(x0, graph))
