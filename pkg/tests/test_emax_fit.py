import math

import numpy as np
import pytest

from emaxmnar import (
    DoseLevelsError,
    EmaxParams,
    SingularInformationError,
    TrialRecord,
    emax_hessian,
    emax_loglik,
    emax_score,
    expand_dataset,
    firth_score_theta,
    fisher_info_theta,
    fit_emax,
    grad_eta,
    jeffreys_penalty_theta,
    logit,
    success_prob,
)
from emaxmnar.emax_fit import NewtonControls, default_theta_init, fisher_info_theta_deriv
from emaxmnar.simulate import SimDesign, generate_trial_arrays
from emaxmnar.model_core import trial_records_from_arrays

from conftest import random_pseudo
from _oracles import (
    emax_profile_grid,
    fd_gradient,
    fd_jacobian,
    logdet_cofactor_3x3,
    rel_err,
)


class TestDerivatives:
    def test_score_single_record(self, theta_default):
        pseudo = expand_dataset([TrialRecord(0, 30.0, 1)])
        pi = success_prob(30.0, theta_default)
        expected = (1 - pi) * grad_eta(30.0, theta_default)
        assert np.allclose(emax_score(pseudo, theta_default), expected, rtol=1e-14)

    def test_score_matches_finite_differences(self, rng):
        for _ in range(30):
            pseudo, theta, _ = random_pseudo(rng)
            fd = fd_gradient(
                lambda x: emax_loglik(pseudo, EmaxParams.from_array(x)), theta.as_array()
            )
            assert rel_err(emax_score(pseudo, theta), fd) < 1e-6

    def test_hessian_matches_score_jacobian(self, rng):
        for _ in range(30):
            pseudo, theta, _ = random_pseudo(rng)
            fd = fd_jacobian(
                lambda x: emax_score(pseudo, EmaxParams.from_array(x)), theta.as_array()
            )
            H = emax_hessian(pseudo, theta)
            assert np.allclose(H, H.T)
            assert rel_err(H, 0.5 * (fd + fd.T)) < 1e-5

    def test_hessian_placebo_only_rows(self):
        pseudo = expand_dataset([TrialRecord(i, 0.0, i % 2) for i in range(6)])
        theta = EmaxParams(0.3, 1.0, 5.0)
        H = emax_hessian(pseudo, theta)
        assert H[0, 0] != 0.0
        mask = np.ones((3, 3), dtype=bool)
        mask[0, 0] = False
        assert np.all(H[mask] == 0.0)

    def test_hessian_equals_minus_info_when_residuals_vanish(self, pseudo12, theta_default):
        pi = success_prob(pseudo12.dose, theta_default)
        aligned = pseudo12.with_weights(pseudo12.weight)
        aligned.yfill[:] = pi  # force y = pi so the curvature correction drops
        H = emax_hessian(aligned, theta_default)
        info = fisher_info_theta(aligned, theta_default)
        assert np.allclose(H, -info, atol=1e-12)


class TestFisherInfo:
    def test_psd_on_random_instances(self, rng):
        for _ in range(30):
            pseudo, theta, _ = random_pseudo(rng)
            eigs = np.linalg.eigvalsh(fisher_info_theta(pseudo, theta))
            assert eigs.min() >= -1e-10

    def test_placebo_only_rank_one(self):
        pseudo = expand_dataset([TrialRecord(i, 0.0, i % 2) for i in range(8)])
        info = fisher_info_theta(pseudo, EmaxParams(0.0, 1.0, 5.0))
        assert np.linalg.matrix_rank(info, tol=1e-12) == 1

    def test_deriv_analytic_matches_fd(self, rng):
        for _ in range(20):
            pseudo, theta, _ = random_pseudo(rng)
            analytic = fisher_info_theta_deriv(pseudo, theta)
            fd = fisher_info_theta_deriv(pseudo, theta, method="fd")
            assert rel_err(analytic, fd) < 1e-5


class TestJeffreysPenalty:
    def test_value_matches_cofactor_expansion(self, pseudo12, theta_default):
        # half log det of the information on the (e0, emax, log ed50) scale:
        # the reparameterization contributes det(J)^2 = ed50^2
        info = fisher_info_theta(pseudo12, theta_default)
        expected = 0.5 * logdet_cofactor_3x3(info.tolist()) + math.log(theta_default.ed50)
        assert jeffreys_penalty_theta(pseudo12, theta_default) == pytest.approx(
            expected, abs=1e-10
        )

    def test_weight_scaling_shifts_by_half_det_homogeneity(self, pseudo12, theta_default):
        scaled = pseudo12.with_weights(0.5 * pseudo12.weight)
        base = jeffreys_penalty_theta(pseudo12, theta_default)
        shifted = jeffreys_penalty_theta(scaled, theta_default)
        assert shifted == pytest.approx(base + 1.5 * math.log(0.5), rel=1e-12)

    def test_placebo_only_design_is_singular(self):
        pseudo = expand_dataset([TrialRecord(i, 0.0, i % 2) for i in range(8)])
        with pytest.raises(SingularInformationError, match="dose levels"):
            jeffreys_penalty_theta(pseudo, EmaxParams(0.0, 1.0, 5.0))

    def test_firth_score_matches_fd_of_penalized_loglik(self, rng):
        for _ in range(20):
            pseudo, theta, _ = random_pseudo(rng)

            def penalized(x):
                th = EmaxParams.from_array(x)
                return emax_loglik(pseudo, th) + jeffreys_penalty_theta(pseudo, th)

            fd = fd_gradient(penalized, theta.as_array())
            assert rel_err(firth_score_theta(pseudo, theta), fd) < 1e-5

    def test_trace_term_reduces_to_firth_logistic_intercept_correction(self):
        # all-placebo rows with emax frozen at 0: the e0 block of the
        # penalty gradient must equal the intercept-only logistic leverage
        # correction sum h_i (1/2 - pi)
        records = [TrialRecord(i, 0.0, int(i < 3)) for i in range(10)]
        pseudo = expand_dataset(records)
        theta = EmaxParams(-0.4, 0.0, 5.0)
        info = fisher_info_theta(pseudo, theta)
        dinfo = fisher_info_theta_deriv(pseudo, theta)
        trace_e0 = 0.5 * dinfo[0][0, 0] / info[0, 0]
        pi = success_prob(0.0, theta)
        v = pseudo.weight * pi * (1 - pi)
        leverages = v / v.sum()  # intercept-only hat diagonal
        expected = float(np.sum(leverages * (0.5 - pi)))
        assert trace_e0 == pytest.approx(expected, rel=1e-12)


class TestFitEmax:
    def test_score_vanishes_at_optimum(self, balanced12):
        report = fit_emax(expand_dataset(balanced12))
        assert report.converged
        assert np.max(np.abs(emax_score(expand_dataset(balanced12), report.theta))) < 1e-8

    def test_firth_score_vanishes_at_penalized_optimum(self):
        # needs data rich enough for an interior penalized optimum; on very
        # small datasets the penalty can push ed50 to the boundary
        design = SimDesign(n=100, seed=5)
        dose, _, y, _ = generate_trial_arrays(design)
        pseudo = expand_dataset(trial_records_from_arrays(dose, y))
        report = fit_emax(pseudo, firth=True)
        assert report.converged
        score = firth_score_theta(pseudo, report.theta)
        assert np.max(np.abs(score)) < 1e-6

    def test_recovers_generating_curve_at_n450(self):
        design = SimDesign(n=450, seed=2024)
        dose, _, y, _ = generate_trial_arrays(design)
        records = trial_records_from_arrays(dose, y)
        report = fit_emax(expand_dataset(records))
        assert report.converged
        truth = design.theta_true.as_array()
        est = report.theta.as_array()
        for k in range(3):
            assert abs(est[k] - truth[k]) < 3.0 * report.se[k]

    def test_matches_grid_search_on_12_records(self, balanced12):
        report = fit_emax(expand_dataset(balanced12), controls=NewtonControls(tol=1e-12))
        assert report.converged
        doses = np.array([0.0, 7.5, 30.0, 225.0])
        successes = np.array([1.0, 1.0, 2.0, 2.0])
        totals = np.array([3.0, 3.0, 3.0, 3.0])
        coarse, _ = emax_profile_grid(
            doses,
            successes,
            totals,
            np.arange(-5.0, 5.0001, 0.05),
            np.arange(-5.0, 8.0001, 0.05),
            np.arange(-3.0, 6.0001, 0.05),
        )
        fine, fine_val = emax_profile_grid(
            doses,
            successes,
            totals,
            np.arange(coarse[0] - 0.06, coarse[0] + 0.0601, 0.01),
            np.arange(coarse[1] - 0.06, coarse[1] + 0.0601, 0.01),
            np.arange(coarse[2] - 0.06, coarse[2] + 0.0601, 0.01),
        )
        newton = np.array(
            [report.theta.e0, report.theta.emax, math.log(report.theta.ed50)]
        )
        assert np.all(np.abs(newton - fine) <= 0.01 + 1e-9)
        assert report.objective >= fine_val - 1e-9

    def test_firth_survives_complete_separation(self):
        # every success at the two high doses, none at the low ones
        doses = [0, 0, 0, 5, 5, 5, 50, 50, 50, 200, 200, 200]
        outcomes = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
        records = [TrialRecord(i, d, y) for i, (d, y) in enumerate(zip(doses, outcomes))]
        pseudo = expand_dataset(records)
        firth = fit_emax(pseudo, firth=True)
        assert firth.converged
        assert np.all(np.isfinite(firth.theta.as_array()))
        plain = fit_emax(pseudo)
        assert (not plain.converged) or np.max(np.abs(plain.theta.as_array())) > 1e3

    def test_order_invariance(self, balanced12, rng):
        base = fit_emax(expand_dataset(balanced12)).theta.as_array()
        shuffled = list(balanced12)
        rng.shuffle(shuffled)
        other = fit_emax(expand_dataset(shuffled)).theta.as_array()
        assert np.max(np.abs(base - other)) < 1e-8

    def test_requires_two_dose_levels(self):
        records = [TrialRecord(i, 10.0, i % 2) for i in range(6)]
        with pytest.raises(DoseLevelsError, match="2 distinct dose levels"):
            fit_emax(expand_dataset(records))

    def test_nonconvergence_is_flagged_not_raised(self, balanced12):
        report = fit_emax(expand_dataset(balanced12), controls=NewtonControls(max_iter=1))
        assert not report.converged
        assert np.all(np.isfinite(report.theta.as_array()))

    def test_default_init_uses_arm_rates(self, balanced12):
        init = default_theta_init(expand_dataset(balanced12))
        assert init.e0 == pytest.approx(logit(1 / 3))
        assert init.emax == pytest.approx(logit(2 / 3) - logit(1 / 3))
        assert init.ed50 == pytest.approx(np.median([7.5, 30.0, 225.0]))

    def test_report_log_scale_fields(self, balanced12):
        report = fit_emax(expand_dataset(balanced12))
        assert report.log_ed50 == pytest.approx(math.log(report.theta.ed50), rel=1e-14)
        assert report.se_log_ed50 == pytest.approx(report.se[2] / report.theta.ed50, rel=1e-12)
        lo, hi = report.ci_log_ed50
        assert report.ci[2, 0] == pytest.approx(math.exp(lo), rel=1e-12)
        assert report.ci[2, 1] == pytest.approx(math.exp(hi), rel=1e-12)


class TestAscent:
    def test_objective_never_decreases_across_newton_steps(self, rng):
        # objective at the fit is at least the objective at the start
        for firth in (False, True):
            for _ in range(10):
                pseudo, theta, _ = random_pseudo(rng)
                start = emax_loglik(pseudo, theta)
                if firth:
                    start += jeffreys_penalty_theta(pseudo, theta)
                report = fit_emax(pseudo, firth=firth, init=theta)
                assert report.objective >= start - 1e-12
