"""Linear couplings between factor matrices through a consensus matrix.

A coupling ties the mode-``d`` factors of several tensors to one consensus
matrix ``delta``. Five structured schemes are supported; each participant
``i`` carries at most one transform matrix ``A_i``:

* ``exact``                 C_i = delta              (no transform)
* ``rows_to_consensus``     A_i @ C_i = delta        (A_i maps mode dimension onto a common grid)
* ``consensus_to_rows``     C_i = A_i @ delta        (factor rows built from the consensus grid)
* ``cols_to_consensus``     C_i @ A_i = delta        (column combinations match the consensus)
* ``consensus_to_cols``     C_i = delta @ A_i        (factor columns picked/combined from a dictionary)

All closed-form updates below assume squared Frobenius loss; the matricized
constraint residuals also drive the general-loss path and the stopping rules.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

CASES = (
    "exact",
    "rows_to_consensus",
    "consensus_to_rows",
    "cols_to_consensus",
    "consensus_to_cols",
)

_TRANSFORMED = set(CASES) - {"exact"}


@dataclass
class Coupling:
    """One linear coupling: mode, participating tensor ids, case tag and the
    per-participant transforms (None for ``exact``)."""

    mode: int
    participants: tuple
    case: str = "exact"
    transforms: tuple = None
    delta_shape: tuple = None

    def __post_init__(self):
        self.participants = tuple(int(i) for i in self.participants)
        if self.case not in CASES:
            raise ValueError(f"unknown coupling case {self.case!r}")
        if len(self.participants) != len(set(self.participants)):
            raise ValueError("coupling participants must be distinct")
        if not self.participants:
            raise ValueError("coupling needs at least one participant")
        if self.case == "exact":
            if self.transforms is not None:
                raise ValueError("exact coupling takes no transforms")
        else:
            if self.transforms is None or len(self.transforms) != len(self.participants):
                raise ValueError(f"{self.case} coupling needs one transform per participant")
            self.transforms = tuple(np.asarray(t, dtype=float) for t in self.transforms)

    def transform(self, j):
        return None if self.transforms is None else self.transforms[j]

    def index_of(self, tensor_id):
        return self.participants.index(tensor_id)

    def validate(self, factor_shapes):
        """Check transform/factor shape consistency given ``factor_shapes``,
        a dict tensor id -> (n_rows, rank) for this coupling's mode."""
        shapes = [factor_shapes[i] for i in self.participants]
        rows = [s[0] for s in shapes]
        ranks = [s[1] for s in shapes]
        case = self.case
        if case == "exact":
            if len(set(shapes)) != 1:
                raise ValueError(f"exact coupling needs equal factor shapes, got {shapes}")
            self.delta_shape = shapes[0]
            return
        if case in ("rows_to_consensus", "consensus_to_rows"):
            if len(set(ranks)) != 1:
                raise ValueError(f"{case} coupling needs equal ranks, got {ranks}")
        else:
            if len(set(rows)) != 1:
                raise ValueError(f"{case} coupling needs equal mode dimensions, got {rows}")
        if case == "rows_to_consensus":
            grid = {t.shape[0] for t in self.transforms}
            if len(grid) != 1:
                raise ValueError("row transforms disagree on the consensus grid size")
            n_delta = grid.pop()
            for t, n in zip(self.transforms, rows):
                if t.shape != (n_delta, n):
                    raise ValueError(
                        f"row transform shape {t.shape} incompatible with factor rows {n}"
                    )
            if n_delta > min(rows):
                raise ValueError(
                    f"consensus grid size {n_delta} exceeds the smallest coupled mode "
                    f"dimension {min(rows)}"
                )
            self.delta_shape = (n_delta, ranks[0])
        elif case == "consensus_to_rows":
            grid = {t.shape[1] for t in self.transforms}
            if len(grid) != 1:
                raise ValueError("row transforms disagree on the consensus grid size")
            n_delta = grid.pop()
            for t, n in zip(self.transforms, rows):
                if t.shape != (n, n_delta):
                    raise ValueError(
                        f"row transform shape {t.shape} incompatible with factor rows {n}"
                    )
            gram = sum(t.T @ t for t in self.transforms)
            if np.linalg.matrix_rank(gram) < n_delta:
                raise ValueError("consensus_to_rows transforms have rank-deficient Gram")
            self.delta_shape = (n_delta, ranks[0])
        elif case == "cols_to_consensus":
            width = {t.shape[1] for t in self.transforms}
            if len(width) != 1:
                raise ValueError("column transforms disagree on the consensus rank")
            r_delta = width.pop()
            for t, r in zip(self.transforms, ranks):
                if t.shape != (r, r_delta):
                    raise ValueError(
                        f"column transform shape {t.shape} incompatible with rank {r}"
                    )
            self.delta_shape = (rows[0], r_delta)
        else:  # consensus_to_cols
            height = {t.shape[0] for t in self.transforms}
            if len(height) != 1:
                raise ValueError("column transforms disagree on the consensus rank")
            r_delta = height.pop()
            for t, r in zip(self.transforms, ranks):
                if t.shape != (r_delta, r):
                    raise ValueError(
                        f"column transform shape {t.shape} incompatible with rank {r}"
                    )
            self._validate_selection(r_delta)
            gram = sum(t @ t.T for t in self.transforms)
            if np.linalg.matrix_rank(gram) < r_delta:
                raise ValueError(
                    "consensus_to_cols transforms leave part of the consensus unused "
                    "(rank-deficient Gram)"
                )
            self.delta_shape = (rows[0], r_delta)

    def _validate_selection(self, r_delta):
        # binary transforms must be selection matrices: exactly one 1 per
        # column, at most one 1 per row, every consensus column used somewhere
        binary = all(np.isin(t, (0.0, 1.0)).all() for t in self.transforms)
        if not binary:
            return
        used = np.zeros(r_delta, dtype=bool)
        for t in self.transforms:
            if np.any(t.sum(axis=0) != 1):
                raise ValueError("selection transforms need exactly one 1 per column")
            if np.any(t.sum(axis=1) > 1):
                raise ValueError("selection transforms allow at most one 1 per row")
            used |= t.sum(axis=1) > 0
        if not used.all():
            missing = int(np.flatnonzero(~used)[0])
            raise ValueError(f"consensus column {missing} is used by no participant")


def constraint_lhs(cpl, j, c):
    """Matricized ``H vec(C)`` for participant ``j``."""
    if cpl.case == "rows_to_consensus":
        return cpl.transforms[j] @ c
    if cpl.case == "cols_to_consensus":
        return c @ cpl.transforms[j]
    return c


def consensus_map(cpl, j, delta):
    """Matricized ``H_delta vec(delta)`` for participant ``j``."""
    if cpl.case == "consensus_to_rows":
        return cpl.transforms[j] @ delta
    if cpl.case == "consensus_to_cols":
        return delta @ cpl.transforms[j]
    return delta


def constraint_residual(cpl, j, c, delta):
    """Matricized coupling constraint residual for participant ``j``."""
    return constraint_lhs(cpl, j, c) - consensus_map(cpl, j, delta)


def constraint_adjoint(cpl, j, r):
    """Adjoint of ``X -> constraint_lhs(X)`` applied to a residual matrix."""
    if cpl.case == "rows_to_consensus":
        return cpl.transforms[j].T @ r
    if cpl.case == "cols_to_consensus":
        return r @ cpl.transforms[j].T
    return r


def coupling_residual(cpl, j, c, delta):
    """Relative primal coupling residual ``||H vec C - H_delta delta|| /
    ||H vec C||`` with a guarded denominator."""
    num = np.linalg.norm(constraint_residual(cpl, j, c, delta))
    den = max(np.linalg.norm(constraint_lhs(cpl, j, c)), 1e-15)
    return float(num / den)


def update_dual(cpl, j, c, delta, mu):
    """Scaled dual ascent step: ``mu + (H vec C - H_delta delta)``."""
    return mu + constraint_residual(cpl, j, c, delta)


class CouplingPenalty:
    """Matricized coupling penalty for the general-loss factor subproblem:
    residual(X) = H vec X - H_delta delta + mu, adjoint(R) = H^T R."""

    def __init__(self, cpl, j, delta, mu):
        self.cpl = cpl
        self.j = j
        self.offset = mu - consensus_map(cpl, j, delta)

    def residual(self, x):
        return constraint_lhs(self.cpl, self.j, x) + self.offset

    def adjoint(self, r):
        return constraint_adjoint(self.cpl, self.j, r)


# ---------------------------------------------------------------------------
# Closed-form Frobenius factor update.
#
# The subproblem for one participant is
#   min_X w ||T_[d] - X M^T||_F^2 + (rho/2) ||X - Z + mu_z||_F^2
#                                 + (rho/2) ||H vec X - H_delta delta + mu||_2^2
# Stationarity yields either a right-hand linear system X S = RHS with an
# R x R SPD matrix S, or (rows_to_consensus) the Sylvester equation
#   A X + X B = RHS,   A = (rho/2)(I_n [if Z] + A_r^T A_r),  B = w M^T M.
# ---------------------------------------------------------------------------


class FactorSolver:
    """Factorized left-hand side of one participant's quadratic update;
    reusable across inner iterations as long as ``gram``, ``w`` and ``rho``
    are unchanged."""

    def __init__(self, cpl, j, gram, w, rho, with_z):
        case = None if cpl is None else cpl.case
        coupled = cpl is not None
        base = w * gram
        if case == "rows_to_consensus":
            a = cpl.transforms[j]
            lhs = a.T @ a
            if with_z:
                lhs = lhs + np.eye(a.shape[1])
            self._mode = "sylvester"
            self._a = 0.5 * rho * lhs
            self._lam, self._v = eigh(base)
            self._shifted = []
            for lam in self._lam:
                try:
                    self._shifted.append(cho_factor(self._a + lam * np.eye(self._a.shape[0])))
                except LinAlgError as exc:
                    raise ValueError(
                        "singular factor-update system (zero co-factor Gram eigenvalue "
                        "with an unregularized row-transform coupling)"
                    ) from exc
            return
        s = base.copy()
        # the coupling contributes (rho/2) I only when H is an identity
        # (cols_to_consensus contributes (rho/2) A A^T instead)
        n_eye = 1 if with_z else 0
        if coupled and case != "cols_to_consensus":
            n_eye += 1
        if n_eye:
            s += 0.5 * rho * n_eye * np.eye(s.shape[0])
        if case == "cols_to_consensus":
            a = cpl.transforms[j]
            s += 0.5 * rho * (a @ a.T)
        self._mode = "right"
        try:
            self._cho = cho_factor(s)
        except LinAlgError as exc:
            raise ValueError(
                "singular factor-update system (rank-deficient co-factor Gram "
                "and no proximal terms)"
            ) from exc

    def solve(self, rhs):
        if self._mode == "right":
            return cho_solve(self._cho, rhs.T).T
        rhs_t = rhs @ self._v
        cols = [cho_solve(f, rhs_t[:, r]) for r, f in enumerate(self._shifted)]
        return np.column_stack(cols) @ self._v.T


def factor_rhs(cpl, j, mtt, w, rho, z=None, mu_z=None, delta=None, mu_delta=None):
    """Right-hand side of the quadratic factor update."""
    rhs = w * mtt
    if z is not None:
        rhs = rhs + 0.5 * rho * (z - mu_z)
    if cpl is not None:
        target = consensus_map(cpl, j, delta) - mu_delta
        rhs = rhs + 0.5 * rho * constraint_adjoint(cpl, j, target)
    return rhs


def update_factor(
    cpl,
    j,
    tensor,
    factors,
    mode,
    w,
    rho,
    z=None,
    mu_z=None,
    delta=None,
    mu_delta=None,
    mtt=None,
    gram=None,
):
    """Exact minimizer of one participant's Frobenius factor subproblem.

    ``cpl`` may be None for an uncoupled update (proximal term from ``z``
    only). ``mtt`` and ``gram`` may be passed in when precomputed.
    """
    from .tensors import gram_hadamard, mttkrp

    if mtt is None:
        mtt = mttkrp(tensor, factors, mode)
    if gram is None:
        gram = gram_hadamard(factors, mode)
    solver = FactorSolver(cpl, j, gram, w, rho, with_z=z is not None)
    return solver.solve(factor_rhs(cpl, j, mtt, w, rho, z, mu_z, delta, mu_delta))


def update_delta(cpl, factor_mats, duals):
    """Least-squares consensus update ``argmin_delta sum_j ||H_j vec C_j -
    H_delta_j vec(delta) + mu_j||^2`` in matricized closed form."""
    case = cpl.case
    if case == "exact":
        return sum(c + m for c, m in zip(factor_mats, duals)) / len(factor_mats)
    if case == "rows_to_consensus":
        terms = [a @ c + m for a, c, m in zip(cpl.transforms, factor_mats, duals)]
        return sum(terms) / len(terms)
    if case == "cols_to_consensus":
        terms = [c @ a + m for a, c, m in zip(cpl.transforms, factor_mats, duals)]
        return sum(terms) / len(terms)
    if case == "consensus_to_rows":
        gram = sum(a.T @ a for a in cpl.transforms)
        rhs = sum(a.T @ (c + m) for a, c, m in zip(cpl.transforms, factor_mats, duals))
        try:
            return cho_solve(cho_factor(gram), rhs)
        except LinAlgError as exc:
            raise ValueError("singular consensus update: transform Gram is rank-deficient") from exc
    # consensus_to_cols
    gram = sum(a @ a.T for a in cpl.transforms)
    rhs = sum((c + m) @ a.T for a, c, m in zip(cpl.transforms, factor_mats, duals))
    try:
        return cho_solve(cho_factor(gram), rhs.T).T
    except LinAlgError as exc:
        raise ValueError(
            "singular consensus update: some consensus column is used by no participant"
        ) from exc
