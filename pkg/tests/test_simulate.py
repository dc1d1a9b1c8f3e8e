import numpy as np
import pytest

from emaxmnar import (
    BootstrapError,
    SimDesign,
    TrialRecord,
    aggregate_metrics,
    bootstrap_dose_response,
    child_seed,
    generate_trial,
    generate_trial_arrays,
    replicate_estimates,
    run_replications,
)
from emaxmnar.simulate import ReplicateRow, _stratified_indices, _rng


class TestSimDesign:
    def test_rejects_uneven_arms(self):
        with pytest.raises(ValueError, match="multiple"):
            SimDesign(n=151)

    def test_rejects_duplicate_doses(self):
        with pytest.raises(ValueError, match="distinct"):
            SimDesign(n=100, doses=(0.0, 5.0, 5.0, 10.0, 20.0))

    def test_rejects_wrong_alpha_length(self):
        with pytest.raises(ValueError, match="alpha_true"):
            SimDesign(n=100, alpha_true=(0.0, 1.0))

    def test_defaults_match_design_constants(self):
        design = SimDesign(n=150)
        assert design.doses == (0.0, 7.5, 22.5, 75.0, 225.0)
        assert design.alpha_true == (-2.5, 3.0, 0.0, -0.05, 1.0)
        assert design.theta_true.ed50 == 7.5
        assert design.theta_true.e0 == pytest.approx(np.log(1 / 9))


class TestGenerateTrial:
    def test_equal_arm_sizes(self):
        records = generate_trial(SimDesign(n=150, seed=4))
        doses = np.array([rec.dose for rec in records])
        for level in (0.0, 7.5, 22.5, 75.0, 225.0):
            assert int(np.sum(doses == level)) == 30

    def test_same_seed_identical_different_seed_not(self):
        a = generate_trial(SimDesign(n=100, seed=11))
        b = generate_trial(SimDesign(n=100, seed=11))
        c = generate_trial(SimDesign(n=100, seed=12))
        assert a == b
        assert a != c

    def test_missing_rate_near_15_percent(self):
        # quick check at n = 20k; the full 1e5 version runs in acceptance
        design = SimDesign(n=20_000, seed=99)
        _, _, _, r = generate_trial_arrays(design)
        assert 0.11 < float(np.mean(r)) < 0.19

    def test_mask_hides_outcomes(self):
        design = SimDesign(n=500, seed=5)
        dose, x, y, r = generate_trial_arrays(design)
        records = generate_trial(design)
        for i, rec in enumerate(records):
            assert rec.missing == bool(r[i])
            if not rec.missing:
                assert rec.outcome == int(y[i])
            assert rec.covariates == (x[i, 0], x[i, 1])


class TestChildSeeds:
    def test_pure_function(self):
        assert child_seed(42, 7) == child_seed(42, 7)
        assert child_seed(42, 7) != child_seed(42, 8)
        assert child_seed(42, 7) != child_seed(43, 7)


class TestMetrics:
    def test_identities_on_synthetic_estimates(self):
        design = SimDesign(n=150, seed=0)
        truth = {
            "E0": design.theta_true.e0,
            "Emax": design.theta_true.emax,
            "log_ED50": float(np.log(design.theta_true.ed50)),
        }
        rows = []
        for rep in range(7):
            for name, value in truth.items():
                rows.append(
                    ReplicateRow(rep, "FIL", name, value, 0.2, value - 0.4, value + 0.4, True)
                )
        metrics = aggregate_metrics(rows, design)
        for m in metrics:
            assert m.method == "FIL"
            assert m.s == 7
            assert m.mbe == 0.0
            assert m.mse == 0.0
            assert m.cp == 1.0
            assert m.est_se == pytest.approx(0.2)
            assert m.est_length == pytest.approx(0.8)
            assert m.estimate == pytest.approx(truth[m.parameter])

    def test_invalid_rows_decrement_s(self):
        design = SimDesign(n=150, seed=0)
        rows = [
            ReplicateRow(0, "CC", "E0", 0.0, 0.1, -0.2, 0.2, True),
            ReplicateRow(1, "CC", "E0", np.nan, np.nan, np.nan, np.nan, False),
        ]
        metrics = [m for m in aggregate_metrics(rows, design) if m.parameter == "E0"]
        assert metrics[0].s == 1

    def test_mse_exceeds_squared_mbe(self):
        design = SimDesign(n=50, doses=(0.0, 7.5, 22.5, 75.0, 225.0), seed=3)
        rows = replicate_estimates(design, ["CC", "NRI"], 4)
        for m in aggregate_metrics(rows, design):
            if m.s:
                assert m.mse >= m.mbe**2 - 1e-12

    def test_single_replicate_single_row_each(self):
        design = SimDesign(n=150, seed=1)
        rows = replicate_estimates(design, ["CC", "NRI", "IL", "FIL"], 1)
        assert len(rows) == 12  # 4 methods x 3 parameters
        metrics = run_replications(design, ["CC", "NRI", "IL", "FIL"], 1)
        assert len(metrics) == 12


class TestParallelDeterminism:
    def test_results_invariant_to_parallelism(self):
        design = SimDesign(n=50, seed=1234)
        serial = replicate_estimates(design, ["CC", "IL"], 4, parallelism=1)
        parallel = replicate_estimates(design, ["CC", "IL"], 4, parallelism=2)
        assert serial == parallel


class TestBootstrap:
    def test_single_resample_degenerate_interval(self):
        records = generate_trial(SimDesign(n=50, seed=21))
        curve = bootstrap_dose_response(records, method="NRI", n_boot=1, seed=0)
        assert curve.n_dropped == 0
        for point in curve.points:
            assert point.lower == point.upper

    def test_identical_resamples_collapse_interval(self):
        # one subject per arm: stratified resampling reproduces the dataset
        records = [
            TrialRecord(i, d, y)
            for i, (d, y) in enumerate(zip([0.0, 7.5, 22.5, 75.0, 225.0], [0, 0, 1, 1, 1]))
        ]
        curve = bootstrap_dose_response(records, method="FIL", n_boot=8, seed=0)
        assert curve.n_dropped == 0
        for point in curve.points:
            assert point.upper - point.lower == pytest.approx(0.0, abs=1e-12)

    def test_stratified_resampling_preserves_arm_sizes(self, rng):
        doses = np.repeat([0.0, 7.5, 30.0], 4)
        arms = [np.flatnonzero(doses == lv) for lv in (0.0, 7.5, 30.0)]
        for _ in range(20):
            idx = _stratified_indices(_rng(int(rng.integers(1 << 30))), arms)
            resampled = doses[idx]
            for lv in (0.0, 7.5, 30.0):
                assert int(np.sum(resampled == lv)) == 4

    def test_deterministic_in_seed_and_parallelism(self):
        records = generate_trial(SimDesign(n=50, seed=6))
        a = bootstrap_dose_response(records, method="CC", n_boot=12, seed=9, parallelism=1)
        b = bootstrap_dose_response(records, method="CC", n_boot=12, seed=9, parallelism=2)
        assert a == b

    def test_grid_defaults_to_design_doses(self):
        records = generate_trial(SimDesign(n=50, seed=6))
        curve = bootstrap_dose_response(records, method="NRI", n_boot=3, seed=1)
        assert [p.dose for p in curve.points] == [0.0, 7.5, 22.5, 75.0, 225.0]

    def test_error_when_most_resamples_fail(self):
        # two arms with constant outcomes separate perfectly: the plain ML
        # refit diverges on every resample
        records = [TrialRecord(i, 0.0, 0) for i in range(6)] + [
            TrialRecord(6 + i, 30.0, 1) for i in range(6)
        ]
        with pytest.raises(BootstrapError, match="resamples"):
            bootstrap_dose_response(records, method="CC", n_boot=6, seed=2)

    def test_point_estimate_is_full_data_curve(self, balanced12):
        from emaxmnar import fit_nri, success_prob

        curve = bootstrap_dose_response(balanced12, method="NRI", n_boot=5, seed=3)
        full = fit_nri(balanced12)
        expected = success_prob(np.array([p.dose for p in curve.points]), full.theta)
        assert np.allclose([p.estimate for p in curve.points], expected, atol=1e-12)
