"""Synthetic-data generation and the built-in experiment catalog.

Ground-truth factors are drawn per a configurable distribution (optionally
with controlled column congruence), data tensors are produced by adding
scaled Gaussian noise or by Poisson sampling, and the named experiments
assemble complete coupled problems together with their ground truth.
"""

from dataclasses import dataclass, replace

import numpy as np

from .coupling import Coupling
from .losses import FROBENIUS, Loss
from .prox import Regularizer
from .solver import Problem
from .tensors import reconstruct

EXPERIMENTS = ("exp1a", "exp1b", "exp2", "exp3", "exp4", "exp5")


def generate_collinear_factors(n, r, congruence, rng):
    """Factor matrix with unit-norm columns and pairwise column inner
    products equal to ``congruence``.

    An orthonormalized standard-normal matrix is multiplied by the transposed
    Cholesky factor of ``(1-c) I + c 1 1^T``.
    """
    if not 0.0 <= congruence < 1.0:
        raise ValueError("congruence must lie in [0, 1)")
    if r > n:
        raise ValueError("need at least as many rows as columns")
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    gram = (1.0 - congruence) * np.eye(r) + congruence * np.ones((r, r))
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"congruence {congruence} too close to 1") from exc
    return q @ chol.T


def add_gaussian_noise(x, level, rng):
    """``x + level * (||x||_F / ||n||_F) * n`` with standard-normal ``n``;
    the resulting SNR is ``-20 log10(level)`` dB."""
    if level <= 0:
        raise ValueError("noise level must be positive")
    norm_x = np.linalg.norm(x)
    if norm_x == 0:
        raise ValueError("cannot scale noise to an all-zero tensor")
    noise = rng.standard_normal(x.shape)
    return x + level * (norm_x / np.linalg.norm(noise)) * noise


def sample_poisson(x, rng):
    """Independent Poisson draw per entry, with means given by ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("Poisson means must be nonnegative")
    return rng.poisson(x).astype(float)


@dataclass
class SynthSpec:
    """Recipe for one synthetic coupled dataset."""

    shapes: tuple
    ranks: tuple
    coupling: Coupling = None
    congruence: float = None
    factor_dist: str = "normal"  # "normal" | "uniform" | "gamma"
    noise: str = "gaussian"  # "gaussian" | "poisson" | "none"
    noise_level: float = 0.2
    loss: Loss = FROBENIUS
    nonnegative: bool = False
    normalize: bool = True
    weights: tuple = None

    def __post_init__(self):
        self.shapes = tuple(tuple(int(n) for n in s) for s in self.shapes)
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.shapes) != len(self.ranks):
            raise ValueError("one rank per tensor shape required")
        if self.factor_dist not in ("normal", "uniform", "gamma"):
            raise ValueError(f"unknown factor distribution {self.factor_dist!r}")
        if self.noise not in ("gaussian", "poisson", "none"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.congruence is not None and not 0.0 <= self.congruence < 1.0:
            raise ValueError("congruence must lie in [0, 1)")


def _draw(n, r, spec, rng):
    if spec.congruence is not None:
        return generate_collinear_factors(n, r, spec.congruence, rng)
    if spec.factor_dist == "uniform":
        return rng.random((n, r))
    if spec.factor_dist == "gamma":
        return rng.gamma(1.0, 1.0, (n, r))
    return rng.standard_normal((n, r))


def _coupled_truth(spec, rng):
    """Mode factors for the coupled mode, consistent with the coupling."""
    cpl = spec.coupling
    case = cpl.case
    out = {}
    if case == "exact":
        shared = _draw(spec.shapes[cpl.participants[0]][cpl.mode], spec.ranks[cpl.participants[0]], spec, rng)
        for i in cpl.participants:
            out[i] = shared.copy()
        return out
    if case == "rows_to_consensus":
        first = cpl.participants[0]
        c0 = _draw(spec.shapes[first][cpl.mode], spec.ranks[first], spec, rng)
        delta = cpl.transforms[0] @ c0
        out[first] = c0
        for j, i in enumerate(cpl.participants[1:], start=1):
            t = cpl.transforms[j]
            if t.shape[0] != t.shape[1] or not np.array_equal(t, np.eye(t.shape[0])):
                raise ValueError(
                    "synthetic rows_to_consensus data needs identity transforms for "
                    "all but the first participant"
                )
            out[i] = delta.copy()
        return out
    if case == "consensus_to_rows":
        n_delta = cpl.transforms[0].shape[1]
        delta = _draw(n_delta, spec.ranks[cpl.participants[0]], spec, rng)
        for j, i in enumerate(cpl.participants):
            out[i] = cpl.transforms[j] @ delta
        return out
    if case == "consensus_to_cols":
        r_delta = cpl.transforms[0].shape[0]
        delta = _draw(spec.shapes[cpl.participants[0]][cpl.mode], r_delta, spec, rng)
        for j, i in enumerate(cpl.participants):
            out[i] = delta @ cpl.transforms[j]
        return out
    # cols_to_consensus: supported for [I; 0]-structured transforms
    r_delta = cpl.transforms[0].shape[1]
    n = spec.shapes[cpl.participants[0]][cpl.mode]
    delta = _draw(n, r_delta, spec, rng)
    for j, i in enumerate(cpl.participants):
        t = cpl.transforms[j]
        expected = np.zeros_like(t)
        expected[:r_delta, :] = np.eye(r_delta)
        if not np.array_equal(t, expected):
            raise ValueError(
                "synthetic cols_to_consensus data needs [I; 0]-structured transforms"
            )
        extra = spec.ranks[i] - r_delta
        out[i] = np.hstack([delta, _draw(n, extra, spec, rng)]) if extra else delta.copy()
    return out


def build_problem(spec, rng):
    """Generate one dataset: returns ``(problem, truth)`` where ``truth`` is
    the list of ground-truth factor lists."""
    coupled_mode = spec.coupling.mode if spec.coupling else None
    coupled = _coupled_truth(spec, rng) if spec.coupling else {}
    truth = []
    for i, (shape, rank) in enumerate(zip(spec.shapes, spec.ranks)):
        fs = []
        for d, n in enumerate(shape):
            if d == coupled_mode and i in coupled:
                fs.append(coupled[i])
            else:
                fs.append(_draw(n, rank, spec, rng))
        truth.append(fs)

    data = []
    for fs in truth:
        x = reconstruct(fs)
        if spec.noise == "gaussian":
            t = add_gaussian_noise(x, spec.noise_level, rng)
        elif spec.noise == "poisson":
            t = sample_poisson(x, rng)
        else:
            t = x.copy()
        if spec.normalize:
            t = t / np.linalg.norm(t)
        data.append(t)

    n = len(data)
    weights = list(spec.weights) if spec.weights else [1.0 / n] * n
    regs = [
        [Regularizer("nonnegative") if spec.nonnegative else None] * t.ndim
        for t in data
    ]
    problem = Problem(
        tensors=data,
        ranks=list(spec.ranks),
        weights=weights,
        losses=[spec.loss] * n,
        regularizers=regs,
        couplings=[spec.coupling] if spec.coupling else [],
    )
    problem.validate()
    return problem, truth


def every_second_row_selector(shape_pair):
    """Selection matrix keeping rows 1, 3, 5, ... (1-based) of a factor with
    ``shape_pair[1]`` rows on a grid of ``shape_pair[0]`` points."""
    n_out, n_in = shape_pair
    if n_in != 2 * n_out:
        raise ValueError("every-second-row selection needs n_in == 2 * n_out")
    h = np.zeros((n_out, n_in))
    h[np.arange(n_out), 2 * np.arange(n_out)] = 1.0
    return h


def shared_column_selectors(ranks):
    """Nested column-sharing selection matrices: participant ``i`` uses the
    first ``ranks[i]`` consensus columns; the consensus rank is max(ranks)."""
    r_delta = max(ranks)
    return tuple(np.eye(r_delta)[:, :r] for r in ranks)


def experiment_spec(name, shapes=None, ranks=None, congruence=None, noise_level=None):
    """The named experiment recipes; keyword arguments override the defaults
    (couplings are rebuilt to match)."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    if name in ("exp1a", "exp1b", "exp2", "exp5"):
        shapes = tuple(shapes) if shapes else ((40, 50, 60), (40, 100))
        ranks = tuple(ranks) if ranks else (3, 3)
        if len({s[0] for s in shapes}) != 1 or len(set(ranks)) != 1:
            raise ValueError(f"{name} needs equal first-mode sizes and equal ranks")
        cpl = Coupling(mode=0, participants=tuple(range(len(shapes))))
        common = dict(shapes=shapes, ranks=ranks, coupling=cpl)
        if name == "exp1a":
            spec = SynthSpec(congruence=0.5, weights=(0.5,) * len(shapes), **common)
        elif name == "exp1b":
            spec = SynthSpec(congruence=0.9, weights=(0.5,) * len(shapes), **common)
        elif name == "exp2":
            spec = SynthSpec(
                factor_dist="uniform",
                nonnegative=True,
                weights=(0.5,) * len(shapes),
                **common,
            )
        else:  # exp5: Poisson counts, KL loss, raw (unnormalized) data
            spec = SynthSpec(
                factor_dist="gamma",
                noise="poisson",
                loss=Loss("kl"),
                nonnegative=True,
                normalize=False,
                weights=(1.0,) * len(shapes),
                **common,
            )
    elif name == "exp3":
        shapes = tuple(shapes) if shapes else ((80, 50, 60), (40, 100))
        ranks = tuple(ranks) if ranks else (3, 3)
        if len(shapes) != 2 or shapes[0][0] != 2 * shapes[1][0] or len(set(ranks)) != 1:
            raise ValueError("exp3 needs two tensors with n1 == 2 * n2 in mode 1")
        transforms = (
            every_second_row_selector((shapes[1][0], shapes[0][0])),
            np.eye(shapes[1][0]),
        )
        cpl = Coupling(mode=0, participants=(0, 1), case="rows_to_consensus", transforms=transforms)
        spec = SynthSpec(shapes=shapes, ranks=ranks, coupling=cpl, weights=(0.5, 0.5))
    else:  # exp4
        shapes = tuple(shapes) if shapes else ((40, 50, 60), (40, 70, 60), (40, 30, 50))
        ranks = tuple(ranks) if ranks else (2, 3, 4)
        if len({s[0] for s in shapes}) != 1:
            raise ValueError("exp4 needs equal first-mode sizes")
        if list(ranks) != sorted(ranks):
            raise ValueError("exp4 ranks must be nondecreasing (nested sharing)")
        cpl = Coupling(
            mode=0,
            participants=tuple(range(len(shapes))),
            case="consensus_to_cols",
            transforms=shared_column_selectors(ranks),
        )
        spec = SynthSpec(shapes=shapes, ranks=ranks, coupling=cpl, weights=(0.5,) * len(shapes))
    if congruence is not None:
        spec = replace(spec, congruence=congruence)
    if noise_level is not None:
        spec = replace(spec, noise_level=noise_level)
    return spec


def frobenius_control(problem):
    """The same data refit under squared Frobenius loss (the comparison arm
    of the count-data experiment)."""
    return Problem(
        tensors=[t.copy() for t in problem.tensors],
        ranks=list(problem.ranks),
        weights=list(problem.weights),
        losses=[FROBENIUS] * problem.n_tensors,
        regularizers=[list(r) for r in problem.regularizers],
        couplings=list(problem.couplings),
    )
