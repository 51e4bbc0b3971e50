"""Counterexample dynamics, the noise-ball and heavy-tail labs, the
two-state lock-in experiment, and the certified nonasymptotic bound checks."""
import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from moiforge import theorylab as tl
from moiforge.optim import constant_schedule, custom_schedule
from moiforge.rng import RngStream

from helpers import assert_within_se, binomial_se


# ---------------------------------------------------------------------------
# field audits

class TestFieldAudits:
    def test_all_counterexamples_pass(self):
        for name, make in tl.ALL_COUNTEREXAMPLES.items():
            worst = tl.audit_field(make(), RngStream(0, 701))
            assert worst < tl.FIELD_AUDIT_TOL, name

    def test_corrupted_field_caught(self):
        spec = tl.quadratic_stall_spec()
        bad = dataclasses.replace(spec, g=lambda p: -1.1 * p)
        with pytest.raises(AssertionError, match="field audit"):
            tl.audit_field(bad, RngStream(0, 701))


# ---------------------------------------------------------------------------
# counterexample runs

class TestCounterexamples:
    def test_wiggle_escapes_outward(self):
        rep = tl.run_counterexample(tl.wiggle_spec(2.5), 10000)
        assert rep.verdict == "diverge"
        assert rep.diverged_at is None          # escape, not blow-up
        final = float(rep.phi_trace[-1])
        # crawls up the flat tail: past the watershed but nowhere near
        # leaving float range at this horizon
        assert 3.0 < final < 10.0
        assert final == pytest.approx(4.233430988761989, rel=1e-12)
        tail = rep.phi_trace[rep.phi_trace.size // 2:]
        assert np.all(np.diff(tail) >= 0.0)
        assert float(tl._wiggle_g(final)) > 0.0

    def test_wiggle_inside_basin_converges(self):
        rep = tl.run_counterexample(tl.wiggle_spec(0.1), 10000)
        assert rep.verdict == "converge"
        assert abs(rep.phi_trace[-1]) < 1e-10

    def test_stall_hits_exact_product_limit(self):
        T = 2000
        rep = tl.run_counterexample(tl.quadratic_stall_spec(1.0), T)
        assert rep.verdict == "stall"
        prod = Fraction(1)
        for t in range(T):
            prod *= 1 - Fraction(1, (t + 2) ** 2)
        # telescoping product: (T+2) / (2 (T+1))
        assert prod == Fraction(T + 2, 2 * (T + 1))
        assert float(rep.phi_trace[-1]) == pytest.approx(float(prod), rel=1e-12)
        assert float(prod) > 0.5

    def test_quadratic_diverge_doubles_exactly(self):
        rep = tl.run_counterexample(tl.quadratic_diverge_spec(1.0), 100)
        assert rep.verdict == "diverge"
        assert rep.diverged_at == 40
        # phi_{t+1} = -2 phi_t, exact in binary floats
        for t in range(rep.phi_trace.size):
            assert abs(rep.phi_trace[t]) == 2.0 ** t

    def test_cosh_diverges_fast(self):
        rep = tl.run_counterexample(tl.cosh_spec(1.39), 100)
        assert rep.verdict == "diverge"
        assert rep.diverged_at == 7

    def test_contradicting_expectation_raises(self):
        spec = dataclasses.replace(tl.wiggle_spec(2.5), expected="converge")
        with pytest.raises(AssertionError, match="expected converge"):
            tl.run_counterexample(spec, 1000)

    def test_short_horizon_rejected(self):
        with pytest.raises(ValueError):
            tl.run_counterexample(tl.wiggle_spec(), 0)


# ---------------------------------------------------------------------------
# noise ball

class TestNoiseBall:
    def test_second_moment_formula(self):
        assert tl.noise_ball_second_moment(1, 1.0) == pytest.approx(0.5)
        assert tl.noise_ball_second_moment(0, 2.0) == pytest.approx(4.0)
        # phi0 = 0 leaves only the stationary part
        for t in (1, 3, 10):
            assert tl.noise_ball_second_moment(t, 0.0) == pytest.approx(
                (1.0 - 4.0 ** (-t)) / 3.0)

    def test_experiment_self_asserts(self):
        s = tl.noise_ball_experiment(rng=RngStream(0, 700))
        # the experiment already enforced 3*SE mean / 5% variance /
        # normality; freeze the observed summary for regression
        assert s.mean == pytest.approx(-0.0057057610545, abs=1e-9)
        assert s.variance == pytest.approx(0.3365645549988, abs=1e-9)
        assert s.expected_variance == pytest.approx(1.0 / 3.0)
        assert abs(s.skewness) < 3.2905 * math.sqrt(6.0 / 10000)
        assert abs(s.excess_kurtosis) < 3.2905 * math.sqrt(24.0 / 10000)

    def test_traces_shape(self):
        s = tl.noise_ball_experiment(T=10, reps=10000,
                                     rng=RngStream(5, 700), trace_reps=4)
        assert s.traces.shape == (4, 11)
        assert np.all(s.traces[:, 0] == 1.0)

    def test_rng_required(self):
        with pytest.raises(ValueError):
            tl.noise_ball_experiment()


# ---------------------------------------------------------------------------
# heavy-tailed instability

class TestUnboundedVariance:
    def test_first_step_prob_matches_normal_cdf(self):
        # phi_1 = phi0/2 + (e^{phi0}/2) Z; event |phi_1| > 4
        half = 0.5 * math.exp(2.0)
        exact = stats.norm.sf((4.0 - 1.0) / half) + stats.norm.cdf((-4.0 - 1.0) / half)
        assert tl.first_step_escape_prob(2.0) == pytest.approx(exact, rel=1e-14)
        assert exact == pytest.approx(0.2963639283476, abs=1e-10)

    def test_experiment_reports(self):
        rep = tl.unbounded_variance_experiment(T=30, reps=10000,
                                               rng=RngStream(1, 700))
        # positive escape mass: the sustained-doubling event has
        # nonvanishing probability
        assert rep.escape_fraction >= 1e-4
        assert rep.escape_fraction == pytest.approx(0.082, abs=1e-12)
        # internal 3*SE consistency between MC and the closed form already
        # ran; pin both ends
        assert rep.first_step_prob_mc == pytest.approx(0.2942, abs=1e-12)
        assert rep.first_step_prob_exact == pytest.approx(
            tl.first_step_escape_prob(2.0), rel=1e-15)
        assert rep.per_t_doubling.shape == (30,)
        # the doubling frequency decays along the horizon
        assert rep.per_t_doubling[-1] < rep.per_t_doubling[0]

    def test_escape_fraction_stable_across_seeds(self):
        fracs = [tl.unbounded_variance_experiment(
            T=30, reps=10000, rng=RngStream(seed, 700)).escape_fraction
            for seed in (1, 2, 3)]
        for f in fracs:
            assert_within_se(f, fracs[0], binomial_se(fracs[0], 10000),
                             label="escape fraction")

    def test_traces_shape(self):
        rep = tl.unbounded_variance_experiment(T=10, reps=2000,
                                               rng=RngStream(4, 700),
                                               trace_reps=5)
        assert rep.traces.shape == (5, 11)

    def test_rng_required(self):
        with pytest.raises(ValueError):
            tl.unbounded_variance_experiment()


# ---------------------------------------------------------------------------
# two-state lock-in

class TestLockin:
    def test_field_matches_objective_slope(self):
        # g = -d objective / d phi away from the kink at phi = 0
        h = 1e-6
        for x in (1.0, -1.0):
            for p in (0.7, 1.9, -0.6, -1.8):
                fd = (tl.lockin_objective(x, p + h)
                      - tl.lockin_objective(x, p - h)) / (2.0 * h)
                assert tl.lockin_field(x, p) == pytest.approx(-fd, abs=1e-5)

    def test_positive_state_positive_phi_pushes_up(self):
        assert tl.lockin_field(1.0, 0.5) == 2.0
        assert tl.lockin_field(1.0, 3.0) == 2.0

    def test_toggle_prob_collapses(self):
        assert tl.lockin_toggle_prob(0.0) == pytest.approx(math.exp(-1.0))
        assert tl.lockin_toggle_prob(2.0) == pytest.approx(
            math.exp(-math.exp(2.0)), rel=1e-12)
        assert tl.lockin_toggle_prob(800.0) > 0.0 or tl.lockin_toggle_prob(800.0) == 0.0

    def test_truncated_product(self):
        assert tl.truncated_no_toggle_product(5) == pytest.approx(
            0.6204662160323737, rel=1e-12)

    def test_stuck_path_is_deterministic(self):
        # never-toggled path: phi_T = 2 + 2 sum_{t=1}^{T-1} 1/(t+1)
        rep = tl.younes_experiment(T=5, reps=50, rng=RngStream(6, 700))
        expected = 2.0 + 2.0 * sum(1.0 / (t + 1.0) for t in range(1, 5))
        assert rep.stuck_phi_final == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(4.566666666666666, rel=1e-12)

    def test_single_draw_lockin(self):
        rep = tl.younes_experiment(rng=RngStream(2, 700))
        assert rep.stuck_fraction >= 0.5
        # crude product bound is a valid lower bound
        assert rep.stuck_fraction >= (tl.truncated_no_toggle_product(40)
                                      - 3.0 * binomial_se(0.62, 2000))
        assert rep.stuck_fraction == pytest.approx(0.999, abs=1e-12)
        # conditional on never toggling, the parameter has marched off
        assert np.all(rep.phi_final[~rep.toggled] > 5.0)

    def test_multi_draw_does_not_increase_lockin(self):
        # more kernel draws per update can only raise the toggle hazard;
        # the drop is tiny because the hazard collapses after phi_1 = 2
        single = tl.younes_experiment(rng=RngStream(2, 700)).stuck_fraction
        nt = lambda t: int(math.ceil(1.0 + math.log(1.0 + t)))
        multi = tl.younes_experiment(rng=RngStream(3, 700), nt=nt).stuck_fraction
        assert multi <= single + 3.0 * binomial_se(single, 2000)
        assert multi >= 0.9

    def test_rng_required(self):
        with pytest.raises(ValueError):
            tl.younes_experiment()


# ---------------------------------------------------------------------------
# certified bound checks

class TestTheoremBounds:
    def test_deterministic_bound_exact_value(self):
        # gap / ((t+1) gamma (1 - gamma L / 2)) at t = 0:
        # (1/2) / (1/2 * 3/4) = 4/3
        assert tl.theorem1_bound_exact(0) == Fraction(4, 3)
        assert tl.theorem1_check_exact(2000)

    def test_deterministic_report(self):
        rep = tl.verify_theorem_bound(tl.deterministic_quadratic_problem(), 200)
        assert rep.regime == "deterministic"
        assert rep.empirical[0] == pytest.approx(1.0)
        assert rep.rhs[0] == pytest.approx(4.0 / 3.0)
        assert np.all(rep.empirical <= rep.rhs)
        assert np.all(rep.se == 0.0)

    def test_iid_bound_holds(self):
        rep = tl.verify_theorem_bound(tl.iid_quadratic_problem(), 200,
                                      reps=200, rng=RngStream(7, 700))
        assert rep.regime == "iid"
        assert np.all(rep.empirical - 3.0 * rep.se <= rep.rhs)
        # the empirical min-gradient curve decays
        assert rep.empirical[-1] < rep.empirical[0]

    def test_markov_bound_holds(self):
        rep = tl.verify_theorem_bound(tl.markov_toggle_problem(), 200,
                                      reps=200, rng=RngStream(8, 700))
        assert rep.regime == "markov"
        assert rep.ts[0] == 2            # bound denominator positive from t = 2
        assert np.all(rep.empirical - 3.0 * rep.se <= rep.rhs)

    def test_stochastic_requires_rng(self):
        with pytest.raises(ValueError):
            tl.verify_theorem_bound(tl.iid_quadratic_problem(), 50)

    def test_violation_detected(self):
        # a quadratic run started at the optimum has zero field everywhere;
        # corrupt the lower bound so the gap (and hence the rhs) goes
        # negative and the check must trip
        prob = dataclasses.replace(tl.deterministic_quadratic_problem(),
                                   f_lower=1.0)
        with pytest.raises(AssertionError, match="bound violated"):
            tl.verify_theorem_bound(prob, 50)

    def test_bound_rhs_unknown_regime(self):
        prob = dataclasses.replace(tl.deterministic_quadratic_problem(),
                                   regime="annealed")
        with pytest.raises(ValueError, match="unknown regime"):
            tl.bound_rhs(prob, 10)

    def test_logged_ts_layout(self):
        ts = tl.logged_ts(30)
        assert ts[:10] == list(range(10))
        assert ts[-1] == 29
        ts2 = tl.logged_ts(200, 2)
        assert ts2[0] == 2
        assert ts2[:6] == [2, 3, 4, 5, 6, 7]
        assert ts2[-1] == 199
        assert ts2 == sorted(set(ts2))


class TestAssumptionAudit:
    def test_all_problems_certify(self):
        for make in (tl.deterministic_quadratic_problem,
                     tl.iid_quadratic_problem, tl.markov_toggle_problem):
            rep = tl.audit_assumptions(make())
            assert rep.l_audit <= make().L + 1e-6
            assert rep.worst_second_moment_slack <= 1e-8
            assert rep.worst_mixing_slack <= 1e-8

    def test_understated_l_caught(self):
        prob = dataclasses.replace(tl.deterministic_quadratic_problem(), L=0.5)
        with pytest.raises(AssertionError, match="below audited"):
            tl.audit_assumptions(prob)

    def test_understated_mixing_caught(self):
        prob = dataclasses.replace(tl.markov_toggle_problem(),
                                   rho_fn=lambda k: 4.0 ** (-k))
        with pytest.raises(AssertionError, match="below the audited eigenvalue"):
            tl.audit_assumptions(prob)
