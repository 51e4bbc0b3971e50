"""Step schedules, ascent updates, Polyak averaging, the SGD driver, and
the doubling-round adaptation driver."""
import math
from fractions import Fraction

import numpy as np
import pytest

from moiforge import core, expfam, models, optim
from moiforge.optim import (DIVERGENCE_NORM, DivergenceError, OptimizerState,
                            RoundReport, constant_schedule, custom_schedule,
                            momentum_step, parametric_schedule, polyak_average,
                            polyak_record, round_based_driver, run_sgd,
                            sgd_step, write_trajectory_csv)
from moiforge.rng import RngStream


# ---------------------------------------------------------------------------
# schedules

class TestSchedules:
    def test_parametric_values(self):
        s = parametric_schedule(0.5, 2.0, alpha=1.0)
        assert s(0) == pytest.approx(0.5)
        # gamma0 (1 + C gamma0 t)^-1 at t=3: 0.5 / (1 + 3) = 0.125
        assert s(3) == pytest.approx(0.125)

    def test_parametric_strictly_decreasing(self):
        s = parametric_schedule(1.0, 0.7, alpha=0.6)
        vals = [s(t) for t in range(200)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_truncated_sums_keep_growing(self):
        # alpha <= 1 makes the step sum diverge; the partial sums must grow
        # by the predicted polynomial factor, not flatten out
        s = parametric_schedule(1.0, 1.0, alpha=0.6)
        s1 = sum(s(t) for t in range(10 ** 3))
        s2 = sum(s(t) for t in range(10 ** 4))
        # sum ~ T^0.4 so the ratio should be near 10^0.4 ~ 2.5
        assert s2 > 2.0 * s1

    def test_parametric_validation(self):
        with pytest.raises(ValueError):
            parametric_schedule(0.0, 1.0)
        with pytest.raises(ValueError):
            parametric_schedule(1.0, -1.0)
        with pytest.raises(ValueError):
            parametric_schedule(1.0, 1.0, alpha=1.5)

    def test_constant_and_custom(self):
        assert constant_schedule(0.25)(123) == 0.25
        with pytest.raises(ValueError):
            constant_schedule(0.0)
        s = custom_schedule(lambda t: 1.0 / (t + 2) ** 2)
        assert s(0) == 0.25

    def test_non_positive_custom_step_raises_at_call(self):
        s = custom_schedule(lambda t: 0.0)
        with pytest.raises(ValueError):
            s(5)


# ---------------------------------------------------------------------------
# single steps

class TestSgdStep:
    def test_exact_halving_recursion(self):
        # g = -phi with gamma = 1/2 halves the iterate; dyadic arithmetic
        # keeps this exact at every step
        state = OptimizerState.initial(np.array([1.0]))
        sched = constant_schedule(0.5)
        for t in range(30):
            state = sgd_step(state, -state.phi, sched)
            assert state.phi[0] == 0.5 ** (t + 1)
        assert state.t == 30

    def test_dimension_guard(self):
        state = OptimizerState.initial(np.zeros(2))
        with pytest.raises(ValueError):
            sgd_step(state, np.zeros(3), constant_schedule(0.1))

    def test_non_finite_raises(self):
        state = OptimizerState.initial(np.array([0.0]))
        with pytest.raises(DivergenceError):
            sgd_step(state, np.array([math.inf]), constant_schedule(0.1))

    def test_accepts_gradient_estimate_objects(self):
        from moiforge.grad import GradientEstimate
        state = OptimizerState.initial(np.array([0.0]))
        est = GradientEstimate(np.array([2.0]), 1, "x")
        out = sgd_step(state, est, constant_schedule(0.5))
        assert out.phi[0] == 1.0


def test_momentum_hand_values():
    state = OptimizerState.initial(np.array([1.0]))
    state = momentum_step(state, -state.phi, 0.1, 0.5)
    assert state.phi[0] == pytest.approx(0.9)
    state = momentum_step(state, -state.phi, 0.1, 0.5)
    # 0.9 - 0.09 + 0.5 (0.9 - 1.0) = 0.76
    assert state.phi[0] == pytest.approx(0.76)
    with pytest.raises(ValueError):
        momentum_step(state, np.zeros(1), 0.1, 1.0)


def test_polyak_record_and_average():
    state = OptimizerState.initial(np.array([2.0]))
    with pytest.raises(ValueError):
        polyak_average(state)
    state = polyak_record(state)
    state = replace_phi(state, 4.0)
    state = polyak_record(state)
    assert polyak_average(state)[0] == pytest.approx(3.0)


def replace_phi(state, v):
    from dataclasses import replace
    return replace(state, phi=np.array([float(v)]))


# ---------------------------------------------------------------------------
# the bound for plain deterministic descent, in exact arithmetic

def test_descent_bound_exact_arithmetic():
    # quadratic with curvature 1: f(phi) = phi^2 / 2, ascent field -phi.
    # min_k |g|^2 up to t must stay below (f(phi0) - 0) / sum gamma_k (1 -
    # gamma_k / 2); both sides tracked in Fractions, mirroring float steps.
    sched = parametric_schedule(0.5, 1.0, alpha=1.0)
    phi = Fraction(3)
    f0 = phi * phi / 2
    min_gsq = None
    denom = Fraction(0)
    for t in range(200):
        gamma = Fraction(sched(t))
        gsq = phi * phi
        min_gsq = gsq if min_gsq is None else min(min_gsq, gsq)
        denom += gamma * (1 - gamma / 2)
        phi = phi - gamma * phi
        assert min_gsq <= f0 / denom


# ---------------------------------------------------------------------------
# run_sgd driver

class TestRunSgd:
    def test_trace_layout_and_first_step_gamma(self):
        sched = parametric_schedule(0.5, 2.0, alpha=1.0)
        rep = run_sgd(lambda phi, t, rng: -phi, np.array([1.0]), sched, 4)
        assert rep.phi_trace.shape == (5, 1)
        assert rep.phi_trace[0, 0] == 1.0
        # first update uses the schedule at t=0
        assert rep.gamma_trace[0] == pytest.approx(0.5)
        assert rep.phi_trace[1, 0] == pytest.approx(0.5)
        assert rep.grad_norms[0] == pytest.approx(1.0)
        assert not rep.diverged

    def test_polyak_burn_in_keeps_last_half(self):
        # T=4 with the default 0.5 burn-in records exactly the final two
        # iterates, so the average is their midpoint
        rep = run_sgd(lambda phi, t, rng: -phi, np.array([1.0]),
                      constant_schedule(0.5), 4)
        a, b = rep.phi_trace[3, 0], rep.phi_trace[4, 0]
        assert polyak_average(rep.state)[0] == pytest.approx((a + b) / 2)
        assert rep.state.polyak_count == 2

    def test_divergence_reported_not_raised(self):
        # doubling map crosses the norm guard at 2^40 > 1e12
        rep = run_sgd(lambda phi, t, rng: phi, np.array([1.0]),
                      constant_schedule(1.0), 100)
        assert rep.diverged
        assert rep.divergence_t == 40
        assert rep.final_phi[0] == 2.0 ** 40
        assert rep.phi_trace.shape[0] == 41

    def test_non_finite_field_reported(self):
        def field(phi, t, rng):
            return np.array([math.inf if t == 2 else 1.0])

        rep = run_sgd(field, np.array([0.0]), constant_schedule(1.0), 10)
        assert rep.diverged
        assert rep.divergence_t == 3
        assert rep.phi_trace.shape[0] == 3

    def test_stochastic_field_gets_stream(self):
        seen = []

        def field(phi, t, rng):
            seen.append(rng)
            return -phi

        rng = RngStream(0, 500)
        run_sgd(field, np.zeros(1), constant_schedule(0.1), 3, rng=rng)
        assert all(s is rng for s in seen)


def test_small_step_product_has_nonzero_limit():
    # gamma_t = 1/(t+2)^2 is summable, so even with g = -phi the iterate
    # cannot reach 0: the exact product telescopes to (T+2)/(2(T+1))
    T = 2000
    rep = run_sgd(lambda phi, t, rng: -phi, np.array([1.0]),
                  custom_schedule(lambda t: 1.0 / (t + 2) ** 2), T)
    exact = Fraction(1)
    for t in range(T):
        exact *= 1 - Fraction(1, (t + 2) ** 2)
    assert exact == Fraction(T + 2, 2 * (T + 1))
    assert rep.final_phi[0] == pytest.approx(float(exact), rel=1e-12)
    assert rep.final_phi[0] > 0.5


# ---------------------------------------------------------------------------
# doubling-round driver

class TestRoundDriver:
    def test_fixed_point_when_already_optimal(self):
        # sampler draws iid from the optimum: every round's trimmed mean
        # stays within 3 SE of the true statistic vector
        phi_star = np.array([1.0, 2.0])

        def adapt(phi, size, rng):
            rows = phi_star + 0.5 * rng.normal(size=(size, 2))
            return rows, rows

        rep = round_based_driver(adapt, 6, phi_star, RngStream(1, 500))
        assert rep.round_sizes == [2, 4, 8, 16, 32, 64]
        assert rep.total_samples == 2 ** 7 - 2
        assert rep.retried_rounds == []
        for r, phi_r in enumerate(rep.phi_rounds, start=1):
            kept = rep.round_sizes[r - 1] - int(0.1 * rep.round_sizes[r - 1])
            se = 0.5 / math.sqrt(kept)
            assert np.all(np.abs(phi_r - phi_star) <= 3.5 * se), (r, phi_r)

    def test_retry_accounting(self):
        # size-4 rounds produce a degenerate batch; the doubled retry fixes
        # it and both draws are charged to the sample budget
        def adapt(phi, size, rng):
            if size == 4:
                rows = np.zeros((size, 1))
            else:
                rows = 1.0 + 0.1 * rng.normal(size=(size, 1))
            return rows, rows

        rep = round_based_driver(adapt, 3, np.array([1.0]),
                                 RngStream(2, 500),
                                 feasible=lambda m: abs(m[0]) > 0.5)
        assert rep.retried_rounds == [2]
        assert rep.round_sizes == [2, 4, 8]
        assert rep.total_samples == 2 + (4 + 8) + 8

    def test_retry_exhaustion_raises(self):
        def adapt(phi, size, rng):
            return np.zeros((size, 1)), None

        with pytest.raises(ValueError):
            round_based_driver(adapt, 2, np.zeros(1), RngStream(3, 500),
                               feasible=lambda m: False)

    def test_rounds_validation(self):
        with pytest.raises(ValueError):
            round_based_driver(lambda *a: None, 0, np.zeros(1),
                               RngStream(4, 500))

    def test_heldout_fit_improves_by_round(self):
        # chain-driven adaptation on the constrained bridge: each round's
        # fitted proposal must score the final round's draws at least as
        # well as the round before (median over 10 seeds)
        model = models.WrightFisherBridge()
        target = models.wf_target(model)
        d = model.dim
        fam = expfam.DiagGaussianFamily(d)
        rounds = 6
        curves = []
        for seed in range(10):
            rng = RngStream(seed, 910)
            state = {"x": np.zeros(d)}
            traces = []

            def adapt(phi, size, rr):
                k = core.compose_kernels([
                    core.slice_kernel(target, 1.0),
                    expfam.imh_kernel(fam, phi, target)])
                tr = core.run_chain(k, state["x"], size, rr)
                state["x"] = tr[-1]
                traces.append(tr)
                return np.hstack([tr, tr * tr]), tr

            rep = round_based_driver(
                adapt, rounds, np.concatenate([np.zeros(d), np.ones(d)]),
                rng.substream(0), feasible=fam.feasible_moments)
            held = traces[-1]
            prox = []
            for r in range(rounds - 1):
                eta = expfam.moment_to_natural(fam, rep.phi_rounds[r])
                prox.append(np.mean([fam.log_density(z, eta) for z in held]))
            curves.append(prox)
        med = np.median(np.array(curves), axis=0)
        assert np.all(np.diff(med) >= 0), med


def test_trajectory_csv_golden(tmp_path):
    rep = run_sgd(lambda phi, t, rng: -phi, np.array([1.0]),
                  constant_schedule(0.5), 2)
    f = tmp_path / "traj.csv"
    write_trajectory_csv(f, rep)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,gamma_t,phi_1,grad_norm"
    assert lines[1] == "1,0.5,0.5,1.0"
    assert lines[2] == "2,0.5,0.25,0.5"


def test_divergence_error_carries_trajectory():
    err = DivergenceError("boom", trajectory=np.zeros((2, 1)))
    assert err.trajectory.shape == (2, 1)
