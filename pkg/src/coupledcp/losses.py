"""Elementwise loss functions with gradients, and the bound-constrained
quasi-Newton solver for factor updates under non-Frobenius losses.

Supported losses (``t`` data entry, ``x`` model entry):

* ``frobenius``   (t - x)^2
* ``kl``          x - t*log x + t*log t - t          (t >= 0, x >= 0)
* ``is``          t/x + log x - log t - 1            (t, x > 0)
* ``beta``        t^b/(b(b-1)) + x^b/b - t x^(b-1)/(b-1),  b not in {0, 1}
* ``alpha``       (t^a x^(1-a) - a t + (a-1) x)/(a(a-1)),  a not in {0, 1}
* ``huber``       (t-x)^2 if |t-x| <= d else 2d|t-x| - d^2
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .tensors import co_khatri_rao, unfold

# model entries are clamped to this floor inside divergence evaluations when
# bound constraints make exact zeros reachable
MODEL_FLOOR = 1e-12
# negative model entries beyond this slack are a domain error, not roundoff
FEASIBILITY_SLACK = 1e-9

_PARAM_FIELD = {"beta": "beta", "alpha": "alpha", "huber": "d"}
KINDS = ("frobenius", "kl", "is", "beta", "alpha", "huber")


class DomainError(ValueError):
    """Data or model entries violate the loss function's domain."""


@dataclass(frozen=True)
class Loss:
    kind: str
    param: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind in ("beta", "alpha"):
            if self.param is None or self.param in (0.0, 1.0):
                raise ValueError(f"{self.kind} divergence needs a parameter outside {{0, 1}}")
        elif self.kind == "huber":
            if self.param is None or self.param <= 0:
                raise ValueError("huber needs d > 0")
        elif self.param is not None:
            raise ValueError(f"{self.kind} loss takes no parameter")

    @property
    def requires_nonnegative(self):
        """Whether the model tensor must be elementwise nonnegative."""
        return self.kind in ("kl", "is", "beta", "alpha")


FROBENIUS = Loss("frobenius")


def _domain_fail(name, mask):
    idx = tuple(int(j) for j in np.unravel_index(int(np.argmax(mask)), mask.shape))
    raise DomainError(f"{name} at index {idx}")


def _check_data_domain(loss, t):
    kind = loss.kind
    if kind in ("frobenius", "huber"):
        return
    if kind == "is":
        if np.any(t <= 0):
            _domain_fail("itakura-saito needs data > 0", t <= 0)
    elif np.any(t < 0):
        _domain_fail(f"{kind} needs nonnegative data", t < 0)


def _check_domain(loss, t, x):
    if loss.kind in ("frobenius", "huber"):
        return
    _check_data_domain(loss, t)
    if np.any(x < -FEASIBILITY_SLACK):
        _domain_fail(f"{loss.kind} needs a nonnegative model", x < -FEASIBILITY_SLACK)


def loss_value(loss, data, model):
    """Sum of the elementwise loss over all entries; shapes must match."""
    t = np.asarray(data, dtype=float)
    x = np.asarray(model, dtype=float)
    if t.shape != x.shape:
        raise ValueError(f"shape mismatch: data {t.shape}, model {x.shape}")
    kind = loss.kind
    if kind == "frobenius":
        return float(np.sum((t - x) ** 2))
    if kind == "huber":
        d = loss.param
        r = np.abs(t - x)
        return float(np.sum(np.where(r <= d, r * r, 2.0 * d * r - d * d)))
    _check_domain(loss, t, x)
    x = np.maximum(x, MODEL_FLOOR)
    if kind == "kl":
        # 0*log 0 = 0, so t = 0 entries contribute x only
        pos = t > 0
        tp = t[pos]
        return float(np.sum(x) - np.sum(t) + np.sum(tp * (np.log(tp) - np.log(x[pos]))))
    if kind == "is":
        return float(np.sum(t / x + np.log(x) - np.log(t) - 1.0))
    if kind == "beta":
        b = loss.param
        tb = np.where(t > 0, t, 1.0) ** b  # avoids 0**negative warnings
        tb = np.where(t > 0, tb, 0.0)
        return float(
            np.sum(tb / (b * (b - 1.0)) + x**b / b - t * x ** (b - 1.0) / (b - 1.0))
        )
    if kind == "alpha":
        a = loss.param
        ta = np.where(t > 0, t, 1.0) ** a
        ta = np.where(t > 0, ta, 0.0)
        return float(
            np.sum(ta * x ** (1.0 - a) - a * t + (a - 1.0) * x) / (a * (a - 1.0))
        )
    raise ValueError(f"unknown loss kind {kind!r}")  # pragma: no cover


def loss_gradient(loss, data, model):
    """Entrywise derivative of the loss with respect to the model."""
    t = np.asarray(data, dtype=float)
    x = np.asarray(model, dtype=float)
    if t.shape != x.shape:
        raise ValueError(f"shape mismatch: data {t.shape}, model {x.shape}")
    kind = loss.kind
    if kind == "frobenius":
        return 2.0 * (x - t)
    if kind == "huber":
        d = loss.param
        r = x - t
        return np.where(np.abs(r) <= d, 2.0 * r, 2.0 * d * np.sign(r))
    _check_domain(loss, t, x)
    x = np.maximum(x, MODEL_FLOOR)
    if kind == "kl":
        return 1.0 - t / x
    if kind == "is":
        return (x - t) / (x * x)
    if kind == "beta":
        b = loss.param
        return x ** (b - 1.0) - t * x ** (b - 2.0)
    if kind == "alpha":
        a = loss.param
        ta = np.where(t > 0, t, 1.0) ** a
        ta = np.where(t > 0, ta, 0.0)
        return (1.0 - ta * x ** (-a)) / a
    raise ValueError(f"unknown loss kind {kind!r}")  # pragma: no cover


class _FusedLoss:
    """Value and gradient of ``w * L(T, X)`` sharing one pass over the model.

    Data-side constants (masks, log terms) are precomputed once; the data
    domain is checked once at construction. Used by the subproblem solver,
    where the model is clamped to the domain floor anyway.
    """

    def __init__(self, loss, data, w=1.0):
        t = np.asarray(data, dtype=float)
        _check_data_domain(loss, t)
        self.kind = loss.kind
        self.param = loss.param
        self.w = w
        self.t = t
        if self.kind == "kl":
            pos = t > 0
            tlogt = np.zeros_like(t)
            tlogt[pos] = t[pos] * np.log(t[pos])
            self.const = float(tlogt.sum() - t.sum())
        elif self.kind == "is":
            self.const = float(-np.log(t).sum() - t.size)
        elif self.kind == "beta":
            b = self.param
            tb = np.where(t > 0, np.where(t > 0, t, 1.0) ** b, 0.0)
            self.const = float(tb.sum() / (b * (b - 1.0)))
        elif self.kind == "alpha":
            a = self.param
            self.ta = np.where(t > 0, np.where(t > 0, t, 1.0) ** a, 0.0)

    def __call__(self, x):
        t, w = self.t, self.w
        kind = self.kind
        if kind == "frobenius":
            r = x - t
            return w * float(np.sum(r * r)), (2.0 * w) * r
        if kind == "huber":
            d = self.param
            r = x - t
            a = np.abs(r)
            quad = a <= d
            val = float(np.sum(np.where(quad, r * r, 2.0 * d * a - d * d)))
            return w * val, w * np.where(quad, 2.0 * r, 2.0 * d * np.sign(r))
        xc = np.maximum(x, MODEL_FLOOR)
        if kind == "kl":
            val = float(xc.sum()) + self.const - float(np.sum(t * np.log(xc)))
            return w * val, w * (1.0 - t / xc)
        if kind == "is":
            u = t / xc
            val = float(u.sum() + np.log(xc).sum()) + self.const
            return w * val, w * ((1.0 - u) / xc)
        if kind == "beta":
            b = self.param
            xb1 = xc ** (b - 1.0)
            val = self.const + float(np.sum(xc * xb1 / b - t * xb1 / (b - 1.0)))
            return w * val, w * (xb1 - t * xb1 / xc)
        # alpha
        a = self.param
        x1a = xc ** (1.0 - a)
        val = float(np.sum(self.ta * x1a - a * t + (a - 1.0) * xc)) / (a * (a - 1.0))
        return w * val, (w / a) * (1.0 - self.ta * x1a / xc)


@dataclass(frozen=True)
class SubsolverOptions:
    """L-BFGS-B settings for the factor subproblem."""

    memory: int = 5
    max_iters: int = 100
    max_evals: int = 5000
    pg_tol: float = 1e-10
    f_tol: float = 1e-10


def solve_factor_subproblem(
    loss,
    tensor,
    factors,
    mode,
    w,
    rho,
    z=None,
    mu_z=None,
    coupling_term=None,
    nonneg=False,
    warm_start=None,
    options=None,
    data_unfolded=None,
    cokr=None,
):
    """Approximately minimize the mode-``mode`` factor subproblem

        w * L(T, [[X, others]])
        + (rho/2) ||X - Z + mu_z||_F^2                    (if z given)
        + (rho/2) ||coupling residual(X) + mu_delta||^2   (if coupling given)

    over ``X`` (optionally ``X >= 0``) with L-BFGS-B, starting from
    ``warm_start`` (defaults to ``factors[mode]``). ``coupling_term`` must
    provide ``residual(X)`` and ``adjoint(R)`` in matricized form. Returns
    ``(X, improved)``; when the subsolver fails to improve on the warm start,
    the warm start is returned with ``improved`` False.

    ``data_unfolded`` and ``cokr`` take precomputed copies of the mode
    unfolding and the co-Khatri-Rao matrix (both are constant across the
    inner ADMM iterations of one mode).
    """
    opts = options or SubsolverOptions()
    t_unf = unfold(tensor, mode) if data_unfolded is None else data_unfolded
    m = co_khatri_rao(factors, mode) if cokr is None else cokr
    x0 = np.asarray(factors[mode] if warm_start is None else warm_start, dtype=float)
    shape = x0.shape
    if nonneg:
        x0 = np.maximum(x0, 0.0)
    zc = None if z is None else z - mu_z
    fused = _FusedLoss(loss, t_unf, w)
    first_value = []

    def objective(vec):
        x = vec.reshape(shape)
        val, gmodel = fused(x @ m.T)
        grad = gmodel @ m
        if zc is not None:
            diff = x - zc
            val += 0.5 * rho * np.sum(diff * diff)
            grad += rho * diff
        if coupling_term is not None:
            r = coupling_term.residual(x)
            val += 0.5 * rho * np.sum(r * r)
            grad += rho * coupling_term.adjoint(r)
        if not first_value:
            first_value.append(val)
        return val, grad.ravel()

    result = scipy.optimize.minimize(
        objective,
        x0.ravel(),
        jac=True,
        method="L-BFGS-B",
        bounds=scipy.optimize.Bounds(0.0, np.inf) if nonneg else None,
        options={
            "maxcor": opts.memory,
            "maxiter": opts.max_iters,
            "maxfun": opts.max_evals,
            "gtol": opts.pg_tol,
            "ftol": opts.f_tol,
        },
    )
    # L-BFGS-B evaluates the warm start first; only accept an improvement
    if result.fun <= first_value[0]:
        return result.x.reshape(shape), True
    return x0, False
