# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
import math

import numpy as np

from core_dynamics import RnnParams, step


def finite_difference_jacobian(params, u, x, h: float = 1e-6):
    """Central differences of step() around x."""
    x = np.asarray(x, dtype=np.float64)
    jac = np.empty((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        jac[:, j] = (step(params, u, x + e) - step(params, u, x - e)) / (2 * h)
    return jac


def brute_force_semidistance(a, b) -> float:
    """max over a of min over b, with plain Python loops."""
    worst = 0.0
    for p in a:
        best = math.inf
        for q in b:
            best = min(best, math.sqrt(sum((pi - qi) ** 2 for pi, qi in zip(p, q))))
        worst = max(worst, best)
    return worst


def power_iteration_norm(mat, iterations: int = 5000, seed: int = 0) -> float:
    """Largest singular value by power iteration on M^T M."""
    mat = np.asarray(mat, dtype=np.float64)
    v = np.random.default_rng(seed).normal(size=mat.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = mat.T @ (mat @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(mat @ v))


def random_params(seed: int, n_r: int = 5, n_i: int = 2, n_o: int = 0, alpha: float = 0.7, scale: float = 0.9):
    """Random network with ||W_r|| = scale; with n_o > 0 it has a linear readout and feedback."""
    rng = np.random.default_rng(seed)
    w_r = rng.normal(size=(n_r, n_r))
    w_r *= scale / np.linalg.norm(w_r, 2)
    w_in = rng.uniform(-1.0, 1.0, size=(n_r, n_i))
    if n_o == 0:
        return RnnParams(alpha=alpha, w_r=w_r, w_in=w_in)
    return RnnParams(
        alpha=alpha,
        w_r=w_r,
        w_in=w_in,
        w_fb=rng.uniform(-0.2, 0.2, size=(n_r, n_o)),
        w_o=rng.uniform(-0.2, 0.2, size=(n_o, n_r)),
    )
