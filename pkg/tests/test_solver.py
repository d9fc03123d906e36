import numpy as np
import pytest

from coupledcp import tensors as tn
from coupledcp.coupling import Coupling
from coupledcp.losses import Loss
from coupledcp.metrics import factor_match_score
from coupledcp.prox import Regularizer
from coupledcp.solver import (
    Problem,
    SolverOptions,
    admm_mode_update,
    compute_rho,
    evaluate_objective,
    fit,
    initialize_state,
    inner_residuals,
    InnerSnapshot,
    normalized,
    trace_header,
    write_trace_csv,
)


def make_pair_problem(rng, shapes=((4, 3, 2), (4, 5)), rank=2, nonneg=False, noise=0.0):
    """Exactly coupled tensor + matrix with known ground truth."""
    shared = rng.random((shapes[0][0], rank)) if nonneg else rng.standard_normal((shapes[0][0], rank))
    truth = []
    for shape in shapes:
        fs = [shared.copy()]
        for n in shape[1:]:
            fs.append(rng.random((n, rank)) if nonneg else rng.standard_normal((n, rank)))
        truth.append(fs)
    tensors = []
    for fs in truth:
        x = tn.reconstruct(fs)
        if noise:
            e = rng.standard_normal(x.shape)
            x = x + noise * np.linalg.norm(x) / np.linalg.norm(e) * e
        tensors.append(x)
    regs = None
    if nonneg:
        regs = [[Regularizer("nonnegative")] * len(s) for s in shapes]
    problem = Problem(
        tensors=tensors,
        ranks=[rank] * len(shapes),
        weights=[0.5] * len(shapes),
        regularizers=regs,
        couplings=[Coupling(mode=0, participants=tuple(range(len(shapes))))],
    )
    problem.validate()
    return problem, truth


class TestComputeRho:
    def test_unit_norm_columns(self, rng):
        factors = [np.linalg.qr(rng.standard_normal((6, 3)))[0] for _ in range(3)]
        assert compute_rho(factors, 0) == pytest.approx(1.0, abs=1e-12)

    def test_rank_one_norms(self):
        factors = [
            np.ones((5, 1)),
            np.full((4, 1), 1.0),
            np.full((9, 1), 1.0),
        ]
        factors[1] *= 2.0 / np.linalg.norm(factors[1])
        factors[2] *= 3.0 / np.linalg.norm(factors[2])
        assert compute_rho(factors, 0) == pytest.approx(36.0, rel=1e-12)

    def test_matches_cokr_norm(self, rng):
        factors = [rng.standard_normal((n, 3)) for n in (4, 5, 6)]
        m = tn.co_khatri_rao(factors, 1)
        assert compute_rho(factors, 1) == pytest.approx(
            np.linalg.norm(m) ** 2 / 3, rel=1e-10
        )

    def test_degenerate_floor(self):
        factors = [np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((2, 2))]
        assert compute_rho(factors, 0) == 1e-12


class TestInnerResiduals:
    def test_zero_state(self, rng):
        c = rng.standard_normal((4, 2))
        delta = rng.standard_normal((4, 2))
        cpl = Coupling(0, (0,))
        cpl.validate({0: (4, 2)})
        snap = InnerSnapshot(
            c=c, z=c.copy(), z_prev=c.copy(), mu_z=rng.standard_normal((4, 2)),
            cpl=cpl, j=0, delta=c.copy(), delta_prev=c.copy(),
            mu_delta=rng.standard_normal((4, 2)),
        )
        assert inner_residuals([snap]) == (0.0, 0.0, 0.0, 0.0)

    def test_tiny_dual_blows_up_dual_residual(self, rng):
        c = rng.standard_normal((4, 2))
        snap = InnerSnapshot(
            c=c, z=c + 0.5, z_prev=c.copy(), mu_z=np.full((4, 2), 1e-12)
        )
        r = inner_residuals([snap])
        assert r[2] > 1e6

    def test_matches_definitions(self, rng):
        cpl = Coupling(0, (0, 1), "rows_to_consensus",
                       (rng.standard_normal((3, 5)), rng.standard_normal((3, 4))))
        cpl.validate({0: (5, 2), 1: (4, 2)})
        snaps = []
        expected = np.zeros(4)
        for j, n in enumerate((5, 4)):
            c = rng.standard_normal((n, 2))
            z = rng.standard_normal((n, 2))
            z_prev = rng.standard_normal((n, 2))
            mu_z = rng.standard_normal((n, 2))
            delta = rng.standard_normal((3, 2))
            delta_prev = rng.standard_normal((3, 2))
            mu_d = rng.standard_normal((3, 2))
            snaps.append(InnerSnapshot(c, z, z_prev, mu_z, cpl, j, delta, delta_prev, mu_d))
            h = cpl.transforms[j]
            expected[0] += np.linalg.norm(c - z) / np.linalg.norm(c)
            expected[1] += np.linalg.norm(h @ c - delta) / np.linalg.norm(h @ c)
            expected[2] += np.linalg.norm(z - z_prev) / np.linalg.norm(mu_z)
            expected[3] += np.linalg.norm(delta - delta_prev) / np.linalg.norm(mu_d)
        np.testing.assert_allclose(inner_residuals(snaps), expected, rtol=1e-14)


class TestModeUpdate:
    def test_exact_ls_recovers_true_factor(self, rng):
        truth = [rng.standard_normal((n, 2)) for n in (4, 3, 5)]
        t = tn.reconstruct(truth)
        problem = Problem(tensors=[t], ranks=[2], weights=[1.0])
        problem.validate()
        state = initialize_state(problem, SolverOptions(seed=0, init="randn"),
                                 np.random.default_rng(0))
        state.factors[0][1] = truth[1].copy()
        state.factors[0][2] = truth[2].copy()
        info = admm_mode_update(problem, 0, state, {0: 1.0}, SolverOptions())
        assert info.iterations == 1
        np.testing.assert_allclose(state.factors[0][0], truth[0], atol=1e-10)

    def test_inner_max_iters_one_single_pass(self, rng):
        problem, _ = make_pair_problem(rng, nonneg=True, noise=0.1)
        opts = SolverOptions(seed=3, init="rand", inner_max_iters=1)
        state = initialize_state(problem, opts, np.random.default_rng(3))
        rhos = {i: compute_rho(state.factors[i], 0) for i in range(2)}
        info = admm_mode_update(problem, 0, state, rhos, opts)
        assert info.iterations == 1

    def test_convex_subproblem_converges(self, rng):
        # acceptance fixture: constrained coupled quadratic subproblem,
        # residuals below 1e-6 within 500 inner iterations
        problem, truth = make_pair_problem(rng, nonneg=True, noise=0.05)
        opts = SolverOptions(seed=1, init="rand", inner_max_iters=500, inner_tol=1e-6)
        state = initialize_state(problem, opts, np.random.default_rng(1))
        rhos = {i: compute_rho(state.factors[i], 0) for i in range(2)}
        info = admm_mode_update(problem, 0, state, rhos, opts)
        assert info.iterations < 500
        assert all(r <= 1e-6 for r in info.residuals)


class TestEvaluateObjective:
    def test_truth_and_feasible_state_gives_zeros(self, rng):
        problem, truth = make_pair_problem(rng)
        z = [[f.copy() for f in fs] for fs in truth]
        deltas = {0: truth[0][0].copy()}
        f_t, f_cpl, f_cstr = evaluate_objective(problem, truth, z=z, deltas=deltas)
        assert f_t == pytest.approx(0.0, abs=1e-12)
        assert f_cpl == pytest.approx(0.0, abs=1e-12)
        assert f_cstr == pytest.approx(0.0, abs=1e-12)

    def test_empty_sums_by_convention(self, rng):
        t = rng.standard_normal((3, 4))
        problem = Problem(tensors=[t], ranks=[2])
        factors = [[rng.standard_normal((3, 2)), rng.standard_normal((4, 2))]]
        f_t, f_cpl, f_cstr = evaluate_objective(problem, factors)
        assert f_cpl == 0.0 and f_cstr == 0.0

    def test_f_tensors_recomputation(self, rng):
        problem, truth = make_pair_problem(rng, noise=0.2)
        factors = [
            [rng.standard_normal(f.shape) for f in fs] for fs in truth
        ]
        f_t, _, _ = evaluate_objective(problem, factors)
        expected = sum(
            0.5 * np.linalg.norm(problem.tensors[i] - tn.reconstruct(factors[i])) ** 2
            for i in range(2)
        )
        assert f_t == pytest.approx(expected, rel=1e-12)


class TestInitialization:
    def test_svd_spans_true_space(self, rng):
        truth = [rng.standard_normal((n, 2)) for n in (6, 5, 4)]
        t = tn.reconstruct(truth)
        problem = Problem(tensors=[t], ranks=[2])
        state = initialize_state(problem, SolverOptions(init="svd"), np.random.default_rng(0))
        c = state.factors[0][0]
        # subspace angle between span(c) and span of the true factor
        q_true = np.linalg.qr(truth[0])[0]
        q_est = np.linalg.qr(c)[0]
        s = np.linalg.svd(q_true.T @ q_est, compute_uv=False)
        assert np.arccos(np.clip(s.min(), -1, 1)) < 1e-8

    def test_random_uniform_range(self, rng):
        problem, _ = make_pair_problem(rng)
        state = initialize_state(problem, SolverOptions(init="rand"), np.random.default_rng(5))
        for fs in state.factors:
            for f in fs:
                assert np.all(f >= 0.0) and np.all(f < 1.0)

    def test_seeded_reproducible(self, rng):
        problem, _ = make_pair_problem(rng)
        s1 = initialize_state(problem, SolverOptions(init="randn"), np.random.default_rng(9))
        s2 = initialize_state(problem, SolverOptions(init="randn"), np.random.default_rng(9))
        for a, b in zip(s1.factors, s2.factors):
            for fa, fb in zip(a, b):
                np.testing.assert_array_equal(fa, fb)

    def test_svd_falls_back_for_transformed_coupling(self, rng):
        spec_transforms = (np.eye(4), np.eye(4))
        problem, _ = make_pair_problem(rng)
        problem.couplings = [
            Coupling(0, (0, 1), "rows_to_consensus", spec_transforms)
        ]
        problem.validate()
        with pytest.warns(UserWarning, match="falls back|using random"):
            state = initialize_state(problem, SolverOptions(init="svd"), np.random.default_rng(2))
        assert state.factors[0][0].shape == (4, 2)

    def test_z_initialized_by_prox(self, rng):
        problem, _ = make_pair_problem(rng, nonneg=True)
        state = initialize_state(problem, SolverOptions(init="randn"), np.random.default_rng(4))
        for i in range(2):
            for d in range(problem.tensors[i].ndim):
                np.testing.assert_array_equal(
                    state.z[i][d], np.maximum(state.factors[i][d], 0.0)
                )


class TestFit:
    def test_noise_free_pair_recovery(self, rng):
        problem, truth = make_pair_problem(rng)
        result = fit(problem, SolverOptions(seed=0, init="svd"), ground_truth=truth)
        assert result.trace[-1].f_tensors < 1e-8
        assert factor_match_score(result.factors, truth).fms > 0.9999

    def test_zero_outer_iters_returns_initialization(self, rng):
        problem, _ = make_pair_problem(rng)
        opts = SolverOptions(seed=12, init="randn", outer_max_iters=0)
        result = fit(problem, opts)
        assert result.reason == "max_outer_iterations"
        assert result.trace == []
        expected = initialize_state(problem, opts, np.random.default_rng(12))
        for a, b in zip(result.factors, expected.factors):
            for fa, fb in zip(a, b):
                np.testing.assert_array_equal(fa, fb)

    def test_deterministic_traces(self, rng, tmp_path):
        problem, truth = make_pair_problem(rng, noise=0.1)
        opts = SolverOptions(seed=77, init="randn", outer_max_iters=40)
        r1 = fit(problem, opts, ground_truth=truth)
        r2 = fit(problem, opts, ground_truth=truth)
        for a, b in zip(r1.trace, r2.trace):
            assert (a.f_tensors, a.f_couplings, a.f_constraints, a.fms) == (
                b.f_tensors,
                b.f_couplings,
                b.f_constraints,
                b.fms,
            )
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trace_csv(r1.trace, p1, problem.n_modes, include_timing=False)
        write_trace_csv(r2.trace, p2, problem.n_modes, include_timing=False)
        assert p1.read_bytes() == p2.read_bytes()

    def test_als_monotone_objective(self, rng):
        truth = [rng.standard_normal((n, 2)) for n in (5, 4, 3)]
        t = tn.reconstruct(truth)
        e = rng.standard_normal(t.shape)
        t = t + 0.1 * np.linalg.norm(t) / np.linalg.norm(e) * e
        problem = Problem(tensors=[t], ranks=[2], weights=[1.0])
        result = fit(problem, SolverOptions(seed=1, init="randn", outer_max_iters=60))
        fs = [r.f_tensors for r in result.trace]
        assert all(b <= a + 1e-12 for a, b in zip(fs, fs[1:]))

    def test_trace_bookkeeping(self, rng):
        problem, _ = make_pair_problem(rng, noise=0.1)
        result = fit(problem, SolverOptions(seed=5, init="randn", outer_max_iters=15))
        assert len(result.trace) == 15 or result.reason == "converged"
        secs = [r.seconds for r in result.trace]
        assert all(b >= a for a, b in zip(secs, secs[1:]))
        assert [r.iteration for r in result.trace] == list(range(1, len(result.trace) + 1))

    def test_termination_residuals_below_tolerance(self, rng):
        problem, _ = make_pair_problem(rng, nonneg=True, noise=0.1)
        opts = SolverOptions(seed=2, init="rand")
        result = fit(problem, opts)
        assert result.reason == "converged"
        last = result.trace[-1]
        assert last.f_couplings <= opts.outer_tol_abs
        assert last.f_constraints <= opts.outer_tol_abs


class TestTraceCsv:
    def test_header_layout(self):
        assert trace_header(3) == [
            "iter", "f_tensors", "f_couplings", "f_constraints", "seconds",
            "inner_iters_mode_1", "inner_iters_mode_2", "inner_iters_mode_3", "fms",
        ]

    def test_missing_fms_empty_field(self, rng, tmp_path):
        problem, _ = make_pair_problem(rng, noise=0.1)
        result = fit(problem, SolverOptions(seed=5, init="randn", outer_max_iters=2))
        path = tmp_path / "t.csv"
        write_trace_csv(result.trace, path, problem.n_modes)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 3
        assert lines[1].endswith(",")


class TestProblemValidation:
    def test_two_couplings_same_mode(self, rng):
        problem, _ = make_pair_problem(rng)
        problem.couplings.append(Coupling(0, (0, 1)))
        with pytest.raises(ValueError, match="one coupling per mode"):
            problem.validate()

    def test_coupling_mode_out_of_range(self, rng):
        problem, _ = make_pair_problem(rng)
        problem.couplings = [Coupling(2, (0, 1))]
        with pytest.raises(ValueError, match="no mode"):
            problem.validate()

    def test_negative_data_under_kl(self, rng):
        t = rng.standard_normal((3, 4))
        problem = Problem(tensors=[t], ranks=[2], losses=[Loss("kl")])
        with pytest.raises(Exception, match="negative"):
            problem.validate()

    def test_normalized_helper(self, rng):
        problem, _ = make_pair_problem(rng, noise=0.3)
        scaled = normalized(problem)
        for t in scaled.tensors:
            assert np.linalg.norm(t) == pytest.approx(1.0, rel=1e-12)
        assert scaled.weights == [0.5, 0.5]
