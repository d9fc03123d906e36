"""Alternating-optimization ADMM solver for regularized, linearly coupled
CP factorizations.

Each outer iteration sweeps the modes in ascending order; the convex
subproblem of one mode is solved inexactly by a few iterations of a
three-block ADMM (factors / consensus / split variables) with scaled duals.
Squared-Frobenius factor updates use the closed forms from
:mod:`coupledcp.coupling`; other losses fall back to the bound-constrained
quasi-Newton subsolver in :mod:`coupledcp.losses`.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import coupling as cpl_mod
from . import losses as loss_mod
from . import prox as prox_mod
from . import tensors as tn
from .metrics import factor_match_score

RESID_EPS = 1e-15


class SolverError(RuntimeError):
    """Fatal solver failure (non-finite objective)."""


@dataclass
class Problem:
    """A coupled factorization problem: data tensors, ranks, weights, losses,
    per-(tensor, mode) regularizers and linear couplings."""

    tensors: list
    ranks: list
    weights: list = None
    losses: list = None
    regularizers: list = None
    couplings: list = field(default_factory=list)

    def __post_init__(self):
        self.tensors = [np.asarray(t, dtype=float) for t in self.tensors]
        n = len(self.tensors)
        self.ranks = [int(r) for r in self.ranks]
        if self.weights is None:
            self.weights = [1.0 / n] * n
        self.weights = [float(w) for w in self.weights]
        if self.losses is None:
            self.losses = [loss_mod.FROBENIUS] * n
        if self.regularizers is None:
            self.regularizers = [[None] * t.ndim for t in self.tensors]
        self.couplings = list(self.couplings)

    @property
    def n_tensors(self):
        return len(self.tensors)

    @property
    def n_modes(self):
        return max(t.ndim for t in self.tensors)

    def coupling_in_mode(self, mode):
        for c in self.couplings:
            if c.mode == mode:
                return c
        return None

    def validate(self):
        n = self.n_tensors
        if n < 1:
            raise ValueError("problem needs at least one tensor")
        for name, seq in (
            ("ranks", self.ranks),
            ("weights", self.weights),
            ("losses", self.losses),
            ("regularizers", self.regularizers),
        ):
            if len(seq) != n:
                raise ValueError(f"{name} must have one entry per tensor")
        for i, t in enumerate(self.tensors):
            if t.ndim < 2:
                raise ValueError(f"tensor {i} must have order >= 2")
            if self.ranks[i] < 1:
                raise ValueError(f"rank of tensor {i} must be >= 1")
            if self.weights[i] <= 0:
                raise ValueError(f"weight of tensor {i} must be > 0")
            loss = self.losses[i]
            if loss.kind in ("kl", "beta", "alpha") and np.any(t < 0):
                raise loss_mod.DomainError(f"tensor {i} has negative entries under {loss.kind} loss")
            if loss.kind == "is" and np.any(t <= 0):
                raise loss_mod.DomainError(f"tensor {i} has nonpositive entries under is loss")
            regs = self.regularizers[i]
            if len(regs) != t.ndim:
                raise ValueError(f"tensor {i} needs one regularizer slot per mode")
            for d, reg in enumerate(regs):
                if reg is not None and reg.kind == "normalized_sparsity" and reg.k > t.shape[d]:
                    raise ValueError(
                        f"normalized_sparsity k={reg.k} exceeds dimension {t.shape[d]} "
                        f"of tensor {i} mode {d}"
                    )
        modes = [c.mode for c in self.couplings]
        if len(modes) != len(set(modes)):
            raise ValueError("at most one coupling per mode is supported")
        for c in self.couplings:
            shapes = {}
            for i in c.participants:
                if not 0 <= i < n:
                    raise ValueError(f"coupling names unknown tensor {i}")
                if c.mode >= self.tensors[i].ndim:
                    raise ValueError(f"tensor {i} has no mode {c.mode} to couple")
                shapes[i] = (self.tensors[i].shape[c.mode], self.ranks[i])
            c.validate(shapes)


def normalized(problem, weights=None):
    """Copy of ``problem`` with each tensor scaled to unit Frobenius norm;
    ``weights`` defaults to 1/N each."""
    scaled = [t / np.linalg.norm(t) for t in problem.tensors]
    if weights is None:
        weights = [1.0 / problem.n_tensors] * problem.n_tensors
    return Problem(
        tensors=scaled,
        ranks=list(problem.ranks),
        weights=list(weights),
        losses=list(problem.losses),
        regularizers=[list(r) for r in problem.regularizers],
        couplings=list(problem.couplings),
    )


@dataclass
class SolverOptions:
    inner_max_iters: int = 5
    inner_tol: float = 1e-4
    outer_tol_abs: float = 1e-4
    outer_tol_rel: float = 1e-12
    outer_max_iters: int = 10000
    seed: int = None
    init: str = "svd"  # "svd" | "randn" | "rand"

    def __post_init__(self):
        if self.inner_max_iters < 1:
            raise ValueError("inner_max_iters must be >= 1")
        if min(self.inner_tol, self.outer_tol_abs, self.outer_tol_rel) <= 0:
            raise ValueError("tolerances must be positive")
        if self.init not in ("svd", "randn", "rand"):
            raise ValueError(f"unknown initialization {self.init!r}")


@dataclass
class TraceRecord:
    iteration: int
    f_tensors: float
    f_couplings: float
    f_constraints: float
    seconds: float
    inner_iters: tuple
    fms: float = None


@dataclass
class FitResult:
    factors: list
    deltas: dict
    trace: list
    reason: str  # "converged" | "max_outer_iterations"


class State:
    """Mutable ADMM state: factors, split variables, scaled duals, consensus."""

    def __init__(self, factors, z, mu_z, mu_delta, delta):
        self.factors = factors
        self.z = z
        self.mu_z = mu_z
        self.mu_delta = mu_delta
        self.delta = delta


def uses_split(loss, reg):
    """Whether regularizer ``reg`` is handled through the split variable Z.

    Nonnegativity under a non-Frobenius loss is enforced directly as a bound
    in the quasi-Newton subsolver instead.
    """
    if reg is None or reg.kind == "none":
        return False
    if loss.kind != "frobenius" and reg.kind == "nonnegative":
        return False
    return True


def lower_bound_zero(loss, reg):
    """Whether the general-loss subsolver gets a zero lower bound."""
    if loss.kind == "frobenius":
        return False
    return loss.requires_nonnegative or (reg is not None and reg.kind == "nonnegative")


def compute_rho(factors, mode, rank=None):
    """ADMM step length for one factor update: ||M||_F^2 / R, i.e. the trace
    of the co-factor Gram divided by the rank. Floored at 1e-12."""
    if rank is None:
        rank = factors[0].shape[1]
    rho = float(np.trace(tn.gram_hadamard(factors, mode))) / rank
    return rho if rho > 0 else 1e-12


@dataclass
class InnerSnapshot:
    """Per-tensor view of one inner iteration, used by the stopping rule."""

    c: np.ndarray
    z: np.ndarray = None
    z_prev: np.ndarray = None
    mu_z: np.ndarray = None
    cpl: object = None
    j: int = None
    delta: np.ndarray = None
    delta_prev: np.ndarray = None
    mu_delta: np.ndarray = None


def inner_residuals(snapshots):
    """The four relative residuals of the inner ADMM stopping rule, summed
    over tensors: primal/dual for the split constraint C = Z and primal/dual
    for the coupling constraint."""
    p_constr = d_constr = p_coupl = d_coupl = 0.0
    for s in snapshots:
        if s.z is not None:
            p_constr += np.linalg.norm(s.c - s.z) / max(np.linalg.norm(s.c), RESID_EPS)
            d_constr += np.linalg.norm(s.z - s.z_prev) / max(
                np.linalg.norm(s.mu_z), RESID_EPS
            )
        if s.cpl is not None:
            p_coupl += cpl_mod.coupling_residual(s.cpl, s.j, s.c, s.delta)
            change = cpl_mod.consensus_map(s.cpl, s.j, s.delta - s.delta_prev)
            d_coupl += np.linalg.norm(change) / max(np.linalg.norm(s.mu_delta), RESID_EPS)
    return p_constr, p_coupl, d_constr, d_coupl


def inner_stop_check(snapshots, tol):
    """True when all four inner residuals are at or below ``tol``."""
    resid = inner_residuals(snapshots)
    return all(r <= tol for r in resid), resid


@dataclass
class ModeUpdateInfo:
    iterations: int
    residuals: tuple


def admm_mode_update(problem, mode, state, rhos, options):
    """One invocation of the per-mode ADMM (a few inner iterations).

    Tensors whose mode-``mode`` factor is uncoupled and unsplit are updated
    once outside the loop: exactly (least squares) under Frobenius loss, by a
    single subsolver call otherwise. All remaining tensors iterate factor,
    consensus, split and dual updates until the four inner residuals drop
    below ``options.inner_tol`` or ``options.inner_max_iters`` is reached.
    """
    relevant = [i for i in range(problem.n_tensors) if problem.tensors[i].ndim > mode]
    cpl = problem.coupling_in_mode(mode)

    plans = []
    for i in relevant:
        loss = problem.losses[i]
        reg = problem.regularizers[i][mode]
        coupled = cpl is not None and i in cpl.participants
        plans.append(
            dict(
                i=i,
                loss=loss,
                reg=reg,
                frob=loss.kind == "frobenius",
                split=uses_split(loss, reg),
                nonneg=lower_bound_zero(loss, reg),
                coupled=coupled,
                j=cpl.index_of(i) if coupled else None,
            )
        )

    # precompute the pieces that stay fixed while only mode-``mode`` factors move
    for p in plans:
        i = p["i"]
        if p["frob"]:
            p["mtt"] = tn.mttkrp(problem.tensors[i], state.factors[i], mode)
            p["gram"] = tn.gram_hadamard(state.factors[i], mode)
        else:
            p["t_unf"] = tn.unfold(problem.tensors[i], mode)
            p["m"] = tn.co_khatri_rao(state.factors[i], mode)

    singles = [p for p in plans if not (p["coupled"] or p["split"])]
    members = [p for p in plans if p["coupled"] or p["split"]]

    for p in singles:
        i = p["i"]
        if p["frob"]:
            solver = cpl_mod.FactorSolver(None, None, p["gram"], problem.weights[i], 1.0, False)
            state.factors[i][mode] = solver.solve(problem.weights[i] * p["mtt"])
        else:
            x, _ = loss_mod.solve_factor_subproblem(
                p["loss"],
                problem.tensors[i],
                state.factors[i],
                mode,
                w=problem.weights[i],
                rho=rhos[i],
                nonneg=p["nonneg"],
                data_unfolded=p["t_unf"],
                cokr=p["m"],
            )
            state.factors[i][mode] = x

    if not members:
        return ModeUpdateInfo(iterations=1, residuals=(0.0, 0.0, 0.0, 0.0))

    for p in members:
        if p["frob"]:
            p["solver"] = cpl_mod.FactorSolver(
                cpl if p["coupled"] else None,
                p["j"],
                p["gram"],
                problem.weights[p["i"]],
                rhos[p["i"]],
                with_z=p["split"],
            )

    iterations = 0
    residuals = (np.inf,) * 4
    for _ in range(options.inner_max_iters):
        iterations += 1
        snapshots = []
        for p in members:
            i = p["i"]
            z = state.z[i][mode] if p["split"] else None
            mu_z = state.mu_z[i][mode] if p["split"] else None
            group = cpl if p["coupled"] else None
            delta = state.delta[mode] if p["coupled"] else None
            mu_d = state.mu_delta[i][mode] if p["coupled"] else None
            if p["frob"]:
                rhs = cpl_mod.factor_rhs(
                    group, p["j"], p["mtt"], problem.weights[i], rhos[i],
                    z=z, mu_z=mu_z, delta=delta, mu_delta=mu_d,
                )
                state.factors[i][mode] = p["solver"].solve(rhs)
            else:
                term = (
                    cpl_mod.CouplingPenalty(group, p["j"], delta, mu_d)
                    if p["coupled"]
                    else None
                )
                x, _ = loss_mod.solve_factor_subproblem(
                    p["loss"],
                    problem.tensors[i],
                    state.factors[i],
                    mode,
                    w=problem.weights[i],
                    rho=rhos[i],
                    z=z,
                    mu_z=mu_z,
                    coupling_term=term,
                    nonneg=p["nonneg"],
                    data_unfolded=p["t_unf"],
                    cokr=p["m"],
                )
                state.factors[i][mode] = x

        delta_prev = None
        if cpl is not None:
            delta_prev = state.delta[mode]
            cs = [state.factors[i][mode] for i in cpl.participants]
            mus = [state.mu_delta[i][mode] for i in cpl.participants]
            state.delta[mode] = cpl_mod.update_delta(cpl, cs, mus)

        for p in members:
            i = p["i"]
            c = state.factors[i][mode]
            snap = InnerSnapshot(c=c)
            if p["split"]:
                z_prev = state.z[i][mode]
                z_new = prox_mod.apply_prox(p["reg"], c + state.mu_z[i][mode], rhos[i])
                state.mu_z[i][mode] = state.mu_z[i][mode] + c - z_new
                state.z[i][mode] = z_new
                snap.z, snap.z_prev, snap.mu_z = z_new, z_prev, state.mu_z[i][mode]
            if p["coupled"]:
                state.mu_delta[i][mode] = cpl_mod.update_dual(
                    cpl, p["j"], c, state.delta[mode], state.mu_delta[i][mode]
                )
                snap.cpl, snap.j = cpl, p["j"]
                snap.delta, snap.delta_prev = state.delta[mode], delta_prev
                snap.mu_delta = state.mu_delta[i][mode]
            snapshots.append(snap)

        done, residuals = inner_stop_check(snapshots, options.inner_tol)
        if done:
            break
    return ModeUpdateInfo(iterations=iterations, residuals=residuals)


def evaluate_objective(problem, factors, z=None, deltas=None):
    """The three outer residuals: weighted data-fit loss, summed relative
    coupling residuals, summed relative split residuals."""
    f_tensors = 0.0
    for i in range(problem.n_tensors):
        model = tn.reconstruct(factors[i])
        f_tensors += problem.weights[i] * loss_mod.loss_value(
            problem.losses[i], problem.tensors[i], model
        )
    f_couplings = 0.0
    if deltas:
        for c in problem.couplings:
            if c.mode not in deltas:
                continue
            for j, i in enumerate(c.participants):
                f_couplings += cpl_mod.coupling_residual(
                    c, j, factors[i][c.mode], deltas[c.mode]
                )
    f_constraints = 0.0
    if z is not None:
        for i in range(problem.n_tensors):
            for d in range(problem.tensors[i].ndim):
                zi = z[i][d]
                if zi is not None:
                    f_constraints += np.linalg.norm(factors[i][d] - zi) / max(
                        np.linalg.norm(factors[i][d]), RESID_EPS
                    )
    return float(f_tensors), float(f_couplings), float(f_constraints)


def _prefers_uniform(problem, i, d):
    reg = problem.regularizers[i][d]
    if problem.losses[i].requires_nonnegative:
        return True
    return reg is not None and reg.kind == "nonnegative"


def _svd_factor(matrix, rank, rng):
    u, _, _ = np.linalg.svd(matrix, full_matrices=False)
    have = min(rank, u.shape[1])
    c = np.empty((matrix.shape[0], rank))
    c[:, :have] = u[:, :have]
    if have < rank:
        c[:, have:] = rng.standard_normal((matrix.shape[0], rank - have))
    return c


def initialize_state(problem, options, rng):
    """Initial factors, split variables, duals and consensus matrices.

    ``svd`` initialization uses the leading left singular vectors of the
    mode-d unfoldings, concatenating the unfoldings of exactly-coupled
    tensors; it falls back to random draws (with a warning) when a
    transformed coupling is present. Duals and consensus matrices are
    standard normal; split variables start at prox(C).
    """
    init = options.init
    if init == "svd" and any(c.case != "exact" for c in problem.couplings):
        warnings.warn(
            "svd initialization only supports exact couplings; using random factors"
        )
        init = "auto-random"

    factors = []
    svd_shared = {}
    if init == "svd":
        for c in problem.couplings:
            stacked = np.hstack(
                [tn.unfold(problem.tensors[i], c.mode) for i in c.participants]
            )
            svd_shared[c.mode] = stacked
    for i, t in enumerate(problem.tensors):
        rank = problem.ranks[i]
        fs = []
        for d in range(t.ndim):
            if init == "svd":
                c = problem.coupling_in_mode(d)
                if c is not None and i in c.participants:
                    fs.append(_svd_factor(svd_shared[d], rank, rng))
                else:
                    fs.append(_svd_factor(tn.unfold(t, d), rank, rng))
            else:
                uniform = (
                    init == "rand"
                    or (init == "auto-random" and _prefers_uniform(problem, i, d))
                )
                shape = (t.shape[d], rank)
                fs.append(rng.random(shape) if uniform else rng.standard_normal(shape))
        factors.append(fs)

    delta = {}
    for c in problem.couplings:
        c.validate(
            {i: (problem.tensors[i].shape[c.mode], problem.ranks[i]) for i in c.participants}
        )
        delta[c.mode] = rng.standard_normal(c.delta_shape)

    z = [[None] * t.ndim for t in problem.tensors]
    mu_z = [[None] * t.ndim for t in problem.tensors]
    mu_delta = [[None] * t.ndim for t in problem.tensors]
    for i, t in enumerate(problem.tensors):
        for d in range(t.ndim):
            if uses_split(problem.losses[i], problem.regularizers[i][d]):
                mu_z[i][d] = rng.standard_normal(factors[i][d].shape)
            c = problem.coupling_in_mode(d)
            if c is not None and i in c.participants:
                j = c.index_of(i)
                mu_delta[i][d] = rng.standard_normal(
                    cpl_mod.constraint_lhs(c, j, factors[i][d]).shape
                )
    for i, t in enumerate(problem.tensors):
        for d in range(t.ndim):
            if mu_z[i][d] is not None:
                z[i][d] = prox_mod.apply_prox(problem.regularizers[i][d], factors[i][d], 1.0)
    return State(factors, z, mu_z, mu_delta, delta)


def _outer_done(prev, cur, options):
    for a, b in zip(prev, cur):
        ok_abs = b < options.outer_tol_abs
        ok_rel = abs(b - a) / max(abs(b), RESID_EPS) < options.outer_tol_rel
        if not (ok_abs or ok_rel):
            return False
    return True


def fit(problem, options=None, ground_truth=None):
    """Run the alternating mode sweeps until the outer stopping rule fires.

    Every outer residual must reach the absolute tolerance or stall below the
    relative-change tolerance; otherwise the iteration cap ends the run. With
    ``ground_truth`` (a list of factor lists), every trace record carries the
    factor match score. Deterministic for a fixed ``options.seed``.
    """
    problem.validate()
    options = options or SolverOptions()
    rng = np.random.default_rng(options.seed)
    state = initialize_state(problem, options, rng)
    trace = []
    reason = "max_outer_iterations"
    prev = None
    start = time.perf_counter()
    for k in range(1, options.outer_max_iters + 1):
        inner = []
        for d in range(problem.n_modes):
            relevant = [i for i in range(problem.n_tensors) if problem.tensors[i].ndim > d]
            rhos = {}
            for i in relevant:
                if np.linalg.norm(state.factors[i][d]) == 0:
                    warnings.warn(f"re-randomizing zero factor (tensor {i}, mode {d})")
                    state.factors[i][d] = rng.standard_normal(state.factors[i][d].shape)
                rhos[i] = compute_rho(state.factors[i], d, problem.ranks[i])
            info = admm_mode_update(problem, d, state, rhos, options)
            inner.append(info.iterations)
        fvals = evaluate_objective(problem, state.factors, z=state.z, deltas=state.delta)
        if not all(np.isfinite(v) for v in fvals):
            raise SolverError(
                f"non-finite objective at outer iteration {k}: "
                f"f_tensors={fvals[0]}, f_couplings={fvals[1]}, f_constraints={fvals[2]}"
            )
        fms = None
        if ground_truth is not None:
            fms = factor_match_score(state.factors, ground_truth).fms
        trace.append(
            TraceRecord(
                iteration=k,
                f_tensors=fvals[0],
                f_couplings=fvals[1],
                f_constraints=fvals[2],
                seconds=time.perf_counter() - start,
                inner_iters=tuple(inner),
                fms=fms,
            )
        )
        if prev is not None and _outer_done(prev, fvals, options):
            reason = "converged"
            break
        prev = fvals
    return FitResult(
        factors=state.factors, deltas=dict(state.delta), trace=trace, reason=reason
    )


def trace_header(n_modes):
    cols = ["iter", "f_tensors", "f_couplings", "f_constraints", "seconds"]
    cols += [f"inner_iters_mode_{d + 1}" for d in range(n_modes)]
    cols.append("fms")
    return cols


def write_trace_csv(records, path, n_modes, include_timing=True):
    """Write trace records as CSV.

    With ``include_timing`` False the ``seconds`` field is left empty (the
    same convention as a missing FMS), keeping the file byte-reproducible
    across reruns with the same seed.
    """
    lines = [",".join(trace_header(n_modes))]
    for r in records:
        row = [
            str(r.iteration),
            repr(float(r.f_tensors)),
            repr(float(r.f_couplings)),
            repr(float(r.f_constraints)),
            repr(float(r.seconds)) if include_timing else "",
        ]
        iters = list(r.inner_iters) + [0] * (n_modes - len(r.inner_iters))
        row += [str(n) for n in iters]
        row.append("" if r.fms is None else repr(float(r.fms)))
        lines.append(",".join(row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
