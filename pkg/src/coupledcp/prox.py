"""Proximal operators for factor-matrix regularizers.

``apply_prox(reg, x, rho)`` evaluates ``argmin_u g(u) + (rho/2) ||x - u||_F^2``
for the regularizer ``g``; ``eval_regularizer`` evaluates ``g`` itself
(indicator kinds return 0 or +inf). Column-acting kinds treat each column of
``x`` independently.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

FEAS_TOL = 1e-9

_ELEMENTWISE = {"nonnegative", "box", "lasso"}
_COLUMNWISE = {
    "simplex",
    "monotone",
    "l1_ball",
    "l2_ball",
    "l2_norm",
    "smoothness",
    "normalized_sparsity",
}
KINDS = ("none",) + tuple(sorted(_ELEMENTWISE | _COLUMNWISE))


@dataclass(frozen=True)
class Regularizer:
    """One regularizer ``g`` acting on a factor matrix.

    kind: one of ``none``, ``nonnegative``, ``box``, ``simplex``, ``monotone``,
    ``l1_ball``, ``l2_ball``, ``lasso``, ``l2_norm``, ``smoothness``,
    ``normalized_sparsity``. Parameters: ``gamma`` (lasso / l2_norm /
    smoothness weight), ``lower``/``upper`` (box), ``radius`` (l1_ball),
    ``k`` (normalized_sparsity), ``order`` (smoothness difference order).
    """

    kind: str
    gamma: float = None
    lower: float = None
    upper: float = None
    radius: float = None
    k: int = None
    order: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind in ("lasso", "l2_norm", "smoothness"):
            if self.gamma is None or self.gamma <= 0:
                raise ValueError(f"{self.kind} needs gamma > 0")
        if self.kind == "box":
            if self.lower is None or self.upper is None or self.lower > self.upper:
                raise ValueError("box needs lower <= upper")
        if self.kind == "l1_ball":
            if self.radius is None or self.radius <= 0:
                raise ValueError("l1_ball needs radius > 0")
        if self.kind == "normalized_sparsity":
            if self.k is None or self.k < 1:
                raise ValueError("normalized_sparsity needs k >= 1")
        if self.kind == "smoothness" and self.order < 1:
            raise ValueError("smoothness needs order >= 1")

    @property
    def per_column(self):
        return self.kind in _COLUMNWISE

    @property
    def is_indicator(self):
        return self.kind not in ("none", "lasso", "l2_norm", "smoothness")


def _simplex_threshold(u_desc, target):
    """λ such that sum(max(u - λ, 0)) == target, for u sorted descending."""
    n = u_desc.shape[0]
    css = np.cumsum(u_desc, axis=0) - target
    idx = np.arange(1, n + 1).reshape(-1, *([1] * (u_desc.ndim - 1)))
    cond = u_desc - css / idx > 0
    rho = np.maximum(cond.sum(axis=0), 1)
    lam = np.take_along_axis(css, rho[None, ...] - 1, axis=0)[0] / rho
    return lam


def _project_simplex(x):
    if x.shape[0] == 0:
        raise ValueError("simplex projection of an empty column")
    u = -np.sort(-x, axis=0)
    lam = _simplex_threshold(u, 1.0)
    return np.maximum(x - lam, 0.0)


def _project_l1_ball(x, radius):
    a = np.abs(x)
    norms = a.sum(axis=0)
    inside = norms <= radius
    if np.all(inside):
        return x.copy()
    u = -np.sort(-a, axis=0)
    lam = np.where(inside, 0.0, _simplex_threshold(u, radius))
    out = np.sign(x) * np.maximum(a - lam, 0.0)
    return np.where(inside, x, out)


def _isotonic(y):
    """Pool-adjacent-violators: nondecreasing vector closest to y in l2."""
    n = y.shape[0]
    level = y.astype(float).copy()
    weight = np.ones(n)
    count = 0
    for i in range(n):
        level[count] = y[i]
        weight[count] = 1.0
        count += 1
        while count > 1 and level[count - 2] > level[count - 1]:
            tot = weight[count - 2] + weight[count - 1]
            level[count - 2] = (
                weight[count - 2] * level[count - 2] + weight[count - 1] * level[count - 1]
            ) / tot
            weight[count - 2] = tot
            count -= 1
    return np.repeat(level[:count], weight[:count].astype(int))


def _difference_matrix(n, order):
    return np.diff(np.eye(n), n=order, axis=0)


_smooth_cache = {}


def _smoothness_solver(n, order, ratio):
    # keyed on (n, order, 2*gamma/rho); concurrent reads are safe, insertion
    # races just recompute the same factorization
    key = (n, order, ratio)
    solver = _smooth_cache.get(key)
    if solver is None:
        d = _difference_matrix(n, order)
        solver = cho_factor(ratio * (d.T @ d) + np.eye(n))
        _smooth_cache[key] = solver
    return solver


def _hard_sparse_normalized(x, k):
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        col = x[:, j]
        if not np.any(col):
            out[0, j] = 1.0
            continue
        keep = np.argsort(-np.abs(col), kind="stable")[:k]
        out[keep, j] = col[keep]
        out[:, j] /= np.linalg.norm(out[:, j])
    return out


def apply_prox(reg, x, rho=1.0):
    """Proximal operator of ``(1/rho) * g`` at ``x``.

    Returns ``argmin_u g(u) + (rho/2) ||x - u||_F^2``. For the non-convex
    ``normalized_sparsity`` kind this is *a* minimizer (largest-magnitude
    entries kept, ties broken toward the lowest index).
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    kind = reg.kind
    if kind == "none":
        out = x.copy()
    elif kind == "nonnegative":
        out = np.maximum(x, 0.0)
    elif kind == "box":
        out = np.clip(x, reg.lower, reg.upper)
    elif kind == "lasso":
        t = reg.gamma / rho
        out = np.sign(x) * np.maximum(np.abs(x) - t, 0.0)
    elif kind == "simplex":
        out = _project_simplex(x)
    elif kind == "l1_ball":
        out = _project_l1_ball(x, reg.radius)
    elif kind == "l2_ball":
        norms = np.linalg.norm(x, axis=0)
        out = x / np.maximum(norms, 1.0)
    elif kind == "l2_norm":
        t = reg.gamma / rho
        norms = np.linalg.norm(x, axis=0)
        out = x * (1.0 - t / np.maximum(norms, t))
    elif kind == "monotone":
        out = np.column_stack([_isotonic(x[:, j]) for j in range(x.shape[1])])
    elif kind == "smoothness":
        solver = _smoothness_solver(x.shape[0], reg.order, 2.0 * reg.gamma / rho)
        out = cho_solve(solver, x)
    elif kind == "normalized_sparsity":
        if reg.k > x.shape[0]:
            raise ValueError("normalized_sparsity k exceeds column length")
        out = _hard_sparse_normalized(x, reg.k)
    else:  # pragma: no cover
        raise ValueError(f"unknown regularizer kind {kind!r}")
    return out[:, 0] if squeeze else out


def eval_regularizer(reg, x):
    """Value of ``g(x)``; indicator kinds return 0 when feasible within
    tolerance 1e-9 and +inf otherwise."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    kind = reg.kind
    if kind == "none":
        return 0.0
    if kind == "lasso":
        return reg.gamma * np.abs(x).sum()
    if kind == "l2_norm":
        return reg.gamma * np.linalg.norm(x, axis=0).sum()
    if kind == "smoothness":
        d = _difference_matrix(x.shape[0], reg.order)
        return reg.gamma * float(np.sum((d @ x) ** 2))
    if kind == "nonnegative":
        ok = np.all(x >= -FEAS_TOL)
    elif kind == "box":
        ok = np.all(x >= reg.lower - FEAS_TOL) and np.all(x <= reg.upper + FEAS_TOL)
    elif kind == "simplex":
        ok = np.all(x >= -FEAS_TOL) and np.all(np.abs(x.sum(axis=0) - 1.0) <= FEAS_TOL)
    elif kind == "monotone":
        ok = np.all(np.diff(x, axis=0) >= -FEAS_TOL)
    elif kind == "l1_ball":
        ok = np.all(np.abs(x).sum(axis=0) <= reg.radius + FEAS_TOL)
    elif kind == "l2_ball":
        ok = np.all(np.linalg.norm(x, axis=0) <= 1.0 + FEAS_TOL)
    elif kind == "normalized_sparsity":
        norms = np.linalg.norm(x, axis=0)
        counts = (np.abs(x) > FEAS_TOL).sum(axis=0)
        ok = np.all(np.abs(norms - 1.0) <= FEAS_TOL) and np.all(counts <= reg.k)
    else:  # pragma: no cover
        raise ValueError(f"unknown regularizer kind {kind!r}")
    return 0.0 if ok else np.inf
