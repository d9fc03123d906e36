"""Factor match score and the failed-run classification threshold."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


def failure_threshold(orders):
    """FMS threshold 0.99^(sum of tensor orders) below which a run counts as
    failed."""
    return 0.99 ** sum(orders)


@dataclass
class MatchReport:
    fms: float
    permutations: list
    threshold: float
    passed: bool


def _unit_columns(mat):
    norms = np.linalg.norm(mat, axis=0)
    return mat / np.maximum(norms, 1e-15)


def factor_match_score(estimated, truth):
    """Similarity between two collections of CP models.

    Per tensor, the score matrix ``S[r, s]`` is the product over modes of the
    absolute cosine between estimated column ``r`` and true column ``s``; the
    column permutation maximizing the total score is found by linear
    assignment. The FMS is the product over tensors of the mean matched
    score. Absolute cosines make the score invariant to the sign and scale
    indeterminacy of CP factors.
    """
    if len(estimated) != len(truth):
        raise ValueError("estimated and true collections differ in tensor count")
    fms = 1.0
    perms = []
    orders = []
    for est, ref in zip(estimated, truth):
        if len(est) != len(ref):
            raise ValueError("tensor order mismatch between estimate and truth")
        rank = est[0].shape[1]
        if any(f.shape[1] != rank for f in est) or any(f.shape[1] != rank for f in ref):
            raise ValueError("rank mismatch between estimate and truth")
        score = np.ones((rank, rank))
        for e, r in zip(est, ref):
            score *= np.abs(_unit_columns(e).T @ _unit_columns(r))
        rows, cols = linear_sum_assignment(-score)
        perms.append(tuple(int(c) for c in cols))
        fms *= float(score[rows, cols].mean())
        orders.append(len(est))
    thr = failure_threshold(orders)
    return MatchReport(fms=fms, permutations=perms, threshold=thr, passed=fms >= thr)
