"""Estimate the latent graph of one small set.

A freshly initialised model maps each element through the encoder and the
deep-kernel layer, then turns RBF similarities into a row-stochastic W.
"""

import numpy as np

from dmps import DMPSModel, default_config

cfg = default_config("gaussian")
model = DMPSModel(cfg.model, seed=0)

x = np.array([[0.1], [0.2], [2.5], [2.6]])
graph = model.latent_graph(x)
K, W = graph.blocks()[0]

np.set_printoptions(precision=3, suppress=True)
print("kernel K (1 on the diagonal, symmetric):")
print(K)
print("graph W (rows sum to one):")
print(W)
print("row sums:", W.sum(axis=1))

# Permuting the set permutes K and W the same way.
perm = [2, 0, 3, 1]
K2, _ = model.latent_graph(x[perm]).blocks()[0]
print("conjugation holds:", np.allclose(K2, K[np.ix_(perm, perm)]))
