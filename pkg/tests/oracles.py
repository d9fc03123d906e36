"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, dense Kronecker lifts, generic
QP solves) and shares no code with the library paths it checks. ``vec`` is
column-major throughout, matching the library's constraint convention.
"""

import itertools

import numpy as np
import scipy.optimize


def vec(m):
    return np.ravel(m, order="F")


def unvec(v, shape):
    return np.reshape(v, shape, order="F")


def khatri_rao_loops(a, b):
    out = np.zeros((a.shape[0] * b.shape[0], a.shape[1]))
    for j in range(a.shape[1]):
        for i in range(a.shape[0]):
            out[i * b.shape[0] : (i + 1) * b.shape[0], j] = a[i, j] * b[:, j]
    return out


def reconstruct_loops(factors):
    shape = tuple(f.shape[0] for f in factors)
    rank = factors[0].shape[1]
    out = np.zeros(shape)
    for idx in itertools.product(*[range(n) for n in shape]):
        s = 0.0
        for r in range(rank):
            p = 1.0
            for d, j in enumerate(idx):
                p *= factors[d][j, r]
            s += p
        out[idx] = s
    return out


def full_constraint_matrices(cpl, j, n, rank):
    """Dense (H, H_delta) pair for participant ``j`` under column-major vec."""
    d_rows, d_cols = cpl.delta_shape
    if cpl.case == "exact":
        return np.eye(n * rank), np.eye(d_rows * d_cols)
    t = cpl.transforms[j]
    if cpl.case == "rows_to_consensus":
        return np.kron(np.eye(rank), t), np.eye(d_rows * d_cols)
    if cpl.case == "consensus_to_rows":
        return np.eye(n * rank), np.kron(np.eye(d_cols), t)
    if cpl.case == "cols_to_consensus":
        return np.kron(t.T, np.eye(n)), np.eye(d_rows * d_cols)
    return np.eye(n * rank), np.kron(t.T, np.eye(n))  # consensus_to_cols


def dense_factor_update(cpl, j, t_unf, m, w, rho, z=None, mu_z=None, delta=None, mu_delta=None):
    """Solve the fully vectorized (Kronecker-lifted) factor quadratic."""
    n = t_unf.shape[0]
    rank = m.shape[1]
    size = n * rank
    a = 2.0 * w * np.kron(m.T @ m, np.eye(n))
    b = 2.0 * w * vec(t_unf @ m)
    if z is not None:
        a += rho * np.eye(size)
        b += rho * vec(z - mu_z)
    if cpl is not None:
        h, h_delta = full_constraint_matrices(cpl, j, n, rank)
        a += rho * (h.T @ h)
        b += rho * (h.T @ (h_delta @ vec(delta) - vec(mu_delta)))
    return unvec(np.linalg.solve(a, b), (n, rank))


def delta_gradient(cpl, factor_mats, duals, delta):
    """Gradient of the consensus quadratic at ``delta`` (dense lift)."""
    g = np.zeros(delta.size)
    for j, (c, mu) in enumerate(zip(factor_mats, duals)):
        h, h_delta = full_constraint_matrices(cpl, j, c.shape[0], c.shape[1])
        r = h @ vec(c) - h_delta @ vec(delta) + vec(mu)
        g += -2.0 * h_delta.T @ r
    return g


def isotonic_qp(y, tol=1e-12):
    """Nondecreasing least-squares fit via a generic constrained solver."""
    n = len(y)
    cons = [
        {"type": "ineq", "fun": (lambda x, i=i: x[i + 1] - x[i])} for i in range(n - 1)
    ]
    res = scipy.optimize.minimize(
        lambda x: 0.5 * np.sum((x - y) ** 2),
        np.full(n, float(np.mean(y))),
        jac=lambda x: x - y,
        constraints=cons,
        method="SLSQP",
        options={"maxiter": 500, "ftol": tol},
    )
    return res.x


def fms_exhaustive(estimated, truth):
    """Factor match score by brute-force search over column permutations."""
    total = 1.0
    for est, ref in zip(estimated, truth):
        rank = est[0].shape[1]
        best = -np.inf
        for perm in itertools.permutations(range(rank)):
            score = 0.0
            for r in range(rank):
                p = 1.0
                for e, t in zip(est, ref):
                    u = e[:, r] / max(np.linalg.norm(e[:, r]), 1e-15)
                    v = t[:, perm[r]] / max(np.linalg.norm(t[:, perm[r]]), 1e-15)
                    p *= abs(float(u @ v))
                score += p
            best = max(best, score / rank)
        total *= best
    return total


def finite_difference_gradient(fun, x, step=1e-6):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fun(xp) - fun(xm)) / (2.0 * step)
        it.iternext()
    return g
