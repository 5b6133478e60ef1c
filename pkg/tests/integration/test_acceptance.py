"""
Monte Carlo acceptance suite (slow)

Runs the shipped simulation presets at full size and checks the error
guarantees against alpha plus three binomial standard errors.
Run with: pytest -m slow
"""

import itertools
import math

import numpy as np
import pytest

from app import load_config
from hitcert.cli.formats import dumps_report
from hitcert.core.core import RngStream
from hitcert.diagnostics.diagnostics import sensitivity_sweep
from hitcert.pvalue.pvalue import deterministic_from_arrays, pool_arrays, randomized_from_arrays
from hitcert.scores.scores import ScoreKind, ScoreStatistic
from hitcert.simharness.simharness import (
    SyntheticSpec,
    generate,
    mc_slack,
    mc_standard_error,
    run_ablation_experiment,
    run_budget_experiment,
    run_design_experiment,
    run_null_experiment,
    run_predictor_experiment,
    run_preset,
    run_robustness_experiment,
)

pytestmark = pytest.mark.slow

WORKERS = 4


def preset_spec(name):
    """SyntheticSpec and options of a preset from config.yaml"""
    preset = dict(load_config()["simulation"]["presets"][name])
    preset.pop("experiment")
    options = preset.pop("options", None) or {}
    return SyntheticSpec.from_dict(preset), options


class TestCertificationValidity:
    """Null p-values are super-uniform"""

    @pytest.fixture(scope="class")
    def null_report(self):
        spec, _ = preset_spec("null")
        return run_null_experiment(spec, "confhit_rand", workers=WORKERS)

    def test_randomized_pvalue_validity(self, null_report):
        for alpha in (0.05, 0.1, 0.2, 0.3, 0.5):
            assert null_report.error(alpha) <= mc_slack(alpha, null_report.trials)

    def test_super_uniformity_curve(self, null_report):
        p = np.asarray(null_report.p_values)
        for t in np.round(np.arange(0.01, 1.0, 0.01), 2):
            assert np.mean(p <= t) <= mc_slack(float(t), p.size)

    def test_deterministic_pvalue_validity(self):
        spec, options = preset_spec("deterministic")
        report = run_null_experiment(spec, options["method"], workers=WORKERS)
        for alpha in spec.alpha_grid:
            assert report.error(alpha) <= mc_slack(alpha, report.trials)


class TestDesignErrorControl:
    def test_design_error(self):
        spec, _ = preset_spec("design")
        report = run_design_experiment(spec, "confhit", workers=WORKERS)
        for alpha in (0.1, 0.2, 0.3):
            assert report.error(alpha) <= mc_slack(alpha, report.trials)


class TestEnumerationOracle:
    """Exact enumeration against brute force over every permutation"""

    @staticmethod
    def brute_force(pooled, stat):
        m, n0 = pooled.size, pooled.n0
        perms = np.asarray(list(itertools.permutations(range(m))), dtype=np.intp)
        occupants = perms[:, n0:]
        v = stat.evaluate_draws(pooled.scores, occupants)
        v0 = stat.evaluate(pooled.scores, range(n0, m))
        jw = np.prod(pooled.weights[occupants], axis=1)
        return float(jw[v >= v0].sum() / jw.sum())

    def test_random_instances(self):
        gen = RngStream(77).generator()
        kinds = list(ScoreKind)
        gaps = []
        for i in range(200):
            n0 = int(gen.integers(1, 6))
            k = int(gen.integers(1, 8 - n0))
            stat = ScoreStatistic(kinds[i % len(kinds)])
            pooled = pool_arrays(gen.random(n0), gen.lognormal(size=n0), gen.random(k), gen.lognormal(size=k))

            exact, _ = deterministic_from_arrays(pooled, stat)
            assert exact == pytest.approx(self.brute_force(pooled, stat), abs=1e-12)

            estimate = randomized_from_arrays(pooled, stat, 10_000, RngStream(78).substream(i).generator())
            gaps.append(abs(estimate - exact))
        assert np.mean(gaps) <= 2.0 / math.sqrt(10_000)


class TestAblation:
    def test_unweighted_fails_where_weighted_holds(self):
        spec, _ = preset_spec("ablation")
        reports = run_ablation_experiment(spec, workers=WORKERS)
        weighted, unweighted = reports["confhit_rand"], reports["unweighted"]
        for alpha in spec.alpha_grid:
            assert weighted.error(alpha) <= mc_slack(alpha, weighted.trials)
        assert any(unweighted.error(a) > mc_slack(a, unweighted.trials) for a in (0.05, 0.1))


class TestRobustnessBound:
    def test_null_exceedance_below_bound(self):
        spec, options = preset_spec("robustness")
        report = run_robustness_experiment(spec, workers=WORKERS, **options)
        for t in options["t_grid"]:
            rate = report.error(t)
            mean_bound = report.extra["mean_bound"][str(t)]
            se = math.hypot(mc_standard_error(mean_bound, report.trials),
                            report.extra["bound_standard_error"][str(t)])
            assert rate <= mean_bound + 3.0 * se


class TestBaselineOrdering:
    def test_bonferroni_is_no_more_powerful(self):
        spec, _ = preset_spec("design")
        spec = spec.replace(alpha_grid=[0.1])
        confhit = run_design_experiment(spec, "confhit", workers=WORKERS)
        bonf = run_design_experiment(spec, "bonferroni", workers=WORKERS)

        bonf_rate = 1.0 - bonf.per_alpha[0.1].empty_fraction
        confhit_rate = 1.0 - confhit.per_alpha[0.1].empty_fraction
        assert bonf_rate <= confhit_rate + 2.0 * mc_standard_error(confhit_rate, confhit.trials)
        assert bonf.error(0.1) <= mc_slack(0.1, bonf.trials)


class TestPredictorQuality:
    def test_error_control_and_power(self):
        spec, options = preset_spec("predictor")
        reports = run_predictor_experiment(spec, options["modes"], ["confhit"], workers=WORKERS)
        for mode in options["modes"]:
            null = reports[f"{mode}/null"]
            design = reports[f"{mode}/confhit"]
            for alpha in spec.alpha_grid:
                assert null.error(alpha) <= mc_slack(alpha, null.trials)
                assert design.error(alpha) <= mc_slack(alpha, design.trials)

        for alpha in spec.alpha_grid:
            clean = reports["clean/confhit"].per_alpha[alpha].power_or_rejection
            se = mc_standard_error(clean, spec.trials)
            for mode in ("noisy", "inverse"):
                assert reports[f"{mode}/confhit"].per_alpha[alpha].power_or_rejection <= clean + 2.0 * se


class TestDeterminism:
    def test_reports_independent_of_workers(self):
        preset = dict(load_config()["simulation"]["presets"]["design"])
        overrides = {"trials": 200, "permutations": 500}
        serial = run_preset(preset, workers=1, overrides=overrides)
        again = run_preset(preset, workers=1, overrides=overrides)
        threaded = run_preset(preset, workers=WORKERS, overrides=overrides)
        assert dumps_report(serial) == dumps_report(again) == dumps_report(threaded)


class TestBudgetAllocation:
    def test_realized_positives_meet_estimate(self):
        spec, options = preset_spec("budget")
        report = run_budget_experiment(spec, options["budgets"], workers=WORKERS)
        assert [row["budget"] for row in report.extra["rows"]] == options["budgets"]
        for row in report.extra["rows"]:
            assert row["total_cost"] <= row["budget"]
            assert row["realized_positives"] >= row["estimated_positives"] - 3.0 * row["realized_standard_error"]


class TestSensitivity:
    """Design error under power-transformed exact weights"""

    def test_error_degrades_gracefully(self):
        spec, options = preset_spec("sensitivity")
        gammas = options["gamma_grid"]
        stat = spec.statistic()
        errors = {g: [] for g in gammas}
        for t in range(spec.trials):
            stream = RngStream(spec.seed).substream(t)
            draw = generate(spec, stream.substream(0))
            report = sensitivity_sweep(draw.pool, [draw.batch], draw.true_wfn, gammas, stat, (0.3,),
                                       spec.permutations, stream.substream(1),
                                       hidden_labels=[draw.hidden_labels])
            for g in gammas:
                errors[g].append(report.row(g).error_rate[0.3])

        bound = mc_slack(0.3, spec.trials)
        for g in (1.0, 2.0, 3.0):
            assert np.mean(errors[g]) <= bound
        # under-corrected weights may drift slightly past the nominal level
        assert np.mean(errors[0.5]) <= bound + 0.05
