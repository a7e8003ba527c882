import json

import numpy as np
import pytest

from marketeffects.experiment import Design
from marketeffects.model import make_scenario
from marketeffects.montecarlo import (
    MonteCarloError,
    ReplicationPlan,
    Welford,
    coverage,
    density_data,
    replication_seed,
    run_replications,
    silverman_bandwidth,
)


@pytest.fixture(scope="module")
def tech():
    return make_scenario("tech")


@pytest.fixture(scope="module")
def tech_run(tech):
    plan = ReplicationPlan(tech, Design(), n=2500, num_reps=200, base_seed=3)
    return run_replications(plan, keep_reports=True)


class TestPlan:
    @pytest.mark.parametrize("reps", [0, -1, 2.5])
    def test_num_reps_at_least_one(self, tech, reps):
        with pytest.raises(ValueError):
            ReplicationPlan(tech, num_reps=reps)

    def test_unknown_estimand(self, tech):
        with pytest.raises(ValueError, match="unknown estimands"):
            ReplicationPlan(tech, estimands=("MPE",))

    def test_available_estimands(self, tech):
        assert ReplicationPlan(tech).available_estimands() == ["ADE", "AIE", "dp1_dpi"]
        goat = ReplicationPlan(make_scenario("goat-hay"))
        assert goat.available_estimands() == ["ADE", "AIE", "MPE", "DPE", "IPE", "dp1_deta", "dp2_deta"]

    def test_seeds_are_distinct(self):
        states = {tuple(replication_seed(0, r).generate_state(4)) for r in range(5000)}
        assert len(states) == 5000
        assert tuple(replication_seed(0, 1, 1).generate_state(4)) not in states


class TestWelford:
    def test_matches_two_pass(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, 1000)
        acc = Welford()
        for v in x:
            acc.add(v)
        assert acc.mean == pytest.approx(x.mean(), rel=1e-12)
        assert acc.variance == pytest.approx(x.var(), rel=1e-10)


class TestRunReplications:
    def test_single_replication(self, tech):
        res = run_replications(ReplicationPlan(tech, n=500, num_reps=1), keep_reports=True)
        s = res.summary.estimands["ADE"]
        assert s.mean == res.reports[0].tau_ade_hat
        assert s.sd == 0.0
        assert s.mc_standard_error == 0.0

    def test_summary_fields(self, tech_run):
        summary = tech_run.summary
        assert summary.truth_source == "closed-form"
        for s in summary.estimands.values():
            assert s.mc_standard_error == pytest.approx(s.sd / np.sqrt(s.num_reps))
            assert s.bias == -s.bias_truth_minus_estimate
            assert s.coverage is None or 0.0 <= s.coverage <= 1.0
        assert summary.estimands["ADE"].truth == pytest.approx(2 / 9)

    def test_ade_mean_within_four_standard_errors(self, tech_run):
        s = tech_run.summary.estimands["ADE"]
        assert abs(s.mean - s.truth) <= 4 * s.mc_standard_error

    def test_coverage_matches_reports(self, tech_run):
        truth = tech_run.summary.truth
        assert coverage(tech_run.reports, truth["ADE"]) == tech_run.summary.estimands["ADE"].coverage
        assert coverage(tech_run.reports, truth["AIE"], which="aie") == tech_run.summary.estimands["AIE"].coverage

    def test_reproducible_across_workers(self, tech, tmp_path):
        plan = ReplicationPlan(tech, n=400, num_reps=12, base_seed=9)
        a = run_replications(plan, n_jobs=1, sink=tmp_path / "a.csv")
        b = run_replications(plan, n_jobs=2, sink=tmp_path / "b.csv")
        assert a.summary.to_json() == b.summary.to_json()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_outputs(self, tech_run, tmp_path):
        tech_run.summary.to_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "estimand,truth,mean,sd,bias,bias_truth_minus_estimate,coverage,mc_standard_error,num_reps"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["ADE", "AIE", "dp1_dpi"]
        doc = json.loads(tech_run.summary.to_json(tmp_path / "s.json"))
        assert doc["failed_rep_count"] == 0

    def test_failure_cap(self, tech):
        with pytest.raises(MonteCarloError, match="exceed"):
            run_replications(ReplicationPlan(tech, n=6, num_reps=20))

    def test_failures_are_redrawn_and_counted(self, tech):
        res = run_replications(ReplicationPlan(tech, n=6, num_reps=20, max_failure_rate=100.0))
        assert res.summary.failed_rep_count > 0
        assert len(res.records) == 20

    def test_goat_hay_truth_source(self):
        plan = ReplicationPlan(make_scenario("goat-hay"), n=1000, num_reps=3, estimands=("MPE", "dp1_deta"))
        res = run_replications(plan)
        assert res.summary.truth_source == "numeric mean-field oracle"
        assert list(res.summary.estimands) == ["MPE", "dp1_deta"]
        assert res.summary.truth["dp1_deta"] < 0 < res.summary.truth["dp2_deta"]

    @pytest.mark.slow
    def test_indirect_spread_scales_with_root_n_h(self, tech):
        # same n, perturbation doubled: the sd should roughly halve
        n = 10_000
        sds = []
        for c in (3.2, 6.4):
            plan = ReplicationPlan(tech, Design(h_scale=c), n=n, num_reps=300, base_seed=21)
            sds.append(run_replications(plan).summary.estimands["AIE"].sd)
        assert sds[0] / sds[1] == pytest.approx(2.0, rel=0.30)


class TestCoverage:
    def test_all_cover(self):
        assert coverage([(0.5, 2.5)] * 4, 1.5) == 1.0

    def test_none_cover(self):
        assert coverage([(2.0, 3.0), (-1.0, 0.0)], 1.5) == 0.0

    def test_needs_reports(self):
        with pytest.raises(ValueError):
            coverage([], 0.0)

    def test_level_rebuilds_interval(self, tech_run):
        truth = tech_run.summary.truth["ADE"]
        narrow = coverage(tech_run.reports, truth, level=0.5)
        assert narrow <= tech_run.summary.estimands["ADE"].coverage


class TestDensity:
    def test_two_point_symmetry(self):
        grid, dens = density_data([0.0, 1.0], bandwidth=0.5)
        assert grid.size == 512
        assert np.interp(0.0, grid, dens) == pytest.approx(np.interp(1.0, grid, dens), rel=1e-9)
        assert np.allclose(dens, dens[::-1])

    def test_integrates_to_one(self):
        x = np.random.default_rng(1).normal(size=500)
        grid, dens = density_data(x)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)
        bw = silverman_bandwidth(x)
        assert grid[0] == pytest.approx(x.min() - 3 * bw)
        assert grid[-1] == pytest.approx(x.max() + 3 * bw)

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="zero variance"):
            density_data([2.0, 2.0, 2.0])

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            density_data([1.0])

    def test_mode_near_sample_center(self):
        x = np.random.default_rng(2).normal(0.17, 0.05, 2000)
        grid, dens = density_data(x)
        assert abs(grid[np.argmax(dens)] - 0.17) < 0.02
