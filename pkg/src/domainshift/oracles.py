"""Independent numerical references used by the property checks.

Nothing here shares code with the closed forms it is compared against.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from domainshift.csd import Decomposition, decomposition_objective


def _unpack(z, m, D, k):
    w = z[:m]
    Z = z[m : m + m * k].reshape(m, k)
    Gamma = z[m + m * k :].reshape(D, k)
    return w, Z, Gamma


def constrained_objective(z, W, k):
    """Objective and gradient in the parametrisation ``W_s = P_w Z``.

    ``P_w = I - w w^T / (w^T w)`` keeps ``W_s`` orthogonal to ``w`` for any
    ``Z``, so an unconstrained minimiser searches the feasible set.
    """
    m, D = W.shape
    w, Z, Gamma = _unpack(z, m, D, k)
    s = float(w @ w)
    P = np.eye(m) - np.outer(w, w) / s
    A = Z @ Gamma.T
    R = W - np.outer(w, np.ones(D)) - P @ A
    f = float(np.sum(R * R))
    gZ = -2.0 * P @ R @ Gamma
    gGamma = -2.0 * R.T @ P @ Z
    K = R @ A.T
    gw = -2.0 * R.sum(axis=1) - 2.0 * (-(K + K.T) @ w / s + 2.0 * float(w @ K @ w) * w / s**2)
    return f, np.concatenate([gw, gZ.ravel(), gGamma.ravel()])


def decomposition_oracle(W, k, restarts=50, seed=0):
    """Best feasible decomposition found by multi-restart L-BFGS."""
    W = np.asarray(W, dtype=np.float64)
    m, D = W.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = float(np.sqrt(np.mean(W * W))) or 1.0
    best = None
    for _ in range(restarts):
        z0 = rng.normal(scale=scale, size=m + m * k + D * k)
        res = minimize(constrained_objective, z0, args=(W, k), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-12})
        w, Z, Gamma = _unpack(res.x, m, D, k)
        P = np.eye(m) - np.outer(w, w) / float(w @ w)
        dec = Decomposition(w, P @ Z, Gamma)
        value = decomposition_objective(W, dec)
        if best is None or value < best[0]:
            best = (value, dec)
    return best[1], best[0]


def projector(A, rtol=1e-10):
    """Orthogonal projector onto the column span of ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return np.zeros((A.shape[0], A.shape[0]))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    U = U[:, s > rtol * max(s[0], 1e-300)]
    return U @ U.T


def span_distance(A, B):
    """Spectral norm of the difference of the two column-span projectors."""
    return float(np.linalg.norm(projector(A) - projector(B), 2))


def simplex_argmax(objective, k, grid=200):
    """Maximiser of ``objective`` over the probability simplex.

    A barycentric grid locates the best cell; SLSQP with the simplex
    constraints then polishes from the best grid point.
    """
    if k < 2:
        return np.ones(k)
    best = None
    steps = np.arange(1, grid) / grid
    if k == 2:
        cands = np.column_stack([steps, 1 - steps])
    elif k == 3:
        a, b = np.meshgrid(steps, steps, indexing="ij")
        mask = a + b < 1
        cands = np.column_stack([a[mask], b[mask], 1 - a[mask] - b[mask]])
    else:
        rng = np.random.Generator(np.random.PCG64(0))
        cands = rng.dirichlet(np.ones(k), size=20000)
    values = np.array([objective(c) for c in cands])
    best = cands[int(np.argmax(values))]
    res = minimize(lambda a: -objective(a), best, method="SLSQP", bounds=[(1e-12, 1.0)] * k,
                   constraints=[{"type": "eq", "fun": lambda a: a.sum() - 1.0}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    return res.x if objective(res.x) >= objective(best) else best
