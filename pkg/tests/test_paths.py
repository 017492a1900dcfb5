import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbsvie.bsvie import solve_bsvie
from gbsvie.engine import g_expectation
from gbsvie.model import ProblemSpec, ValidationError, VolControl
from gbsvie.paths import (
    bdg_diagnostic,
    export_batch_csv,
    k_samples,
    mc_lower_bound,
    reconstruct_k,
    reconstruct_k_batch,
    simulate_paths,
)

SPEC = ProblemSpec.build(terminal="x^2", n_t=50)


@pytest.fixture(scope="module")
def x2_bundle():
    return solve_bsvie(SPEC)


def _controls(spec, bundle=None):
    n = spec.tgrid.n_t
    out = [VolControl.constant(0.5, n, "lo"), VolControl.constant(1.0, n, "hi")]
    if bundle is not None:
        out.append(VolControl.feedback(bundle.sig_star, spec.xgrid, 0))
    return out


class TestSimulation:
    @pytest.mark.parametrize("law", ["gaussian", "rademacher"])
    def test_terminal_variance(self, law):
        b = simulate_paths(VolControl.constant(1.0, SPEC.tgrid.n_t), SPEC, 100_000, seed=11, increments=law)
        xT = b.X[:, -1]
        var = xT.var(ddof=1)
        se = np.sqrt(2.0 / (xT.size - 1))  # sd of the sample variance for unit variance
        assert abs(var - 1.0) < 3 * se

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.5, 1.0), min_size=50, max_size=50), st.integers(0, 1000))
    def test_quadratic_variation_bounds_exact(self, sched, seed):
        b = simulate_paths(VolControl.piecewise(sched), SPEC, 50, seed)
        dt = SPEC.tgrid.dt
        assert np.all(b.quad_var >= 0.25 * dt) and np.all(b.quad_var <= dt)
        tot = b.quad_var.sum(axis=1)
        assert np.all(tot >= 0.25 * dt * 50 * (1 - 1e-12)) and np.all(tot <= 1.0 + 1e-12)

    def test_feedback_quadratic_variation_in_band(self, x2_bundle):
        b = simulate_paths(_controls(SPEC, x2_bundle)[2], SPEC, 500, 3)
        dt = SPEC.tgrid.dt
        assert np.all((b.quad_var == 0.25 * dt) | (b.quad_var == dt))

    def test_rademacher_increments_match_quadratic_variation(self):
        b = simulate_paths(VolControl.constant(0.7, SPEC.tgrid.n_t), SPEC, 100, 5)
        np.testing.assert_allclose(b.dB ** 2, b.quad_var, rtol=1e-14)

    @pytest.mark.parametrize("law", ["gaussian", "rademacher"])
    def test_seed_determinism(self, x2_bundle, law):
        c = _controls(SPEC, x2_bundle)[2]
        a = simulate_paths(c, SPEC, 200, 42, increments=law)
        b = simulate_paths(c, SPEC, 200, 42, increments=law)
        assert np.array_equal(a.dB, b.dB) and np.array_equal(a.quad_var, b.quad_var)

    def test_out_of_band_control(self):
        with pytest.raises(ValidationError):
            simulate_paths(VolControl.constant(2.0, SPEC.tgrid.n_t), SPEC, 10, 0)

    def test_unknown_increment_law(self):
        with pytest.raises(ValueError):
            simulate_paths(VolControl.constant(1.0, SPEC.tgrid.n_t), SPEC, 10, 0, increments="cauchy")


class TestLowerBound:
    def test_second_moment(self):
        batches = [simulate_paths(c, SPEC, 20_000, i) for i, c in enumerate(_controls(SPEC))]
        est = mc_lower_bound("x^2", batches)
        lattice = g_expectation("x^2", SPEC.band, SPEC.tgrid, SPEC.xgrid, SPEC.substeps)
        assert est.best == "hi"
        assert est.value <= lattice + 3 * est.stderr
        assert abs(est.value - 1.0) < 3 * est.stderr + 1e-12

    def test_linear_payoff_mean_zero(self):
        for i, c in enumerate(_controls(SPEC)):
            est = mc_lower_bound("x", [simulate_paths(c, SPEC, 20_000, 100 + i, increments="gaussian")])
            assert abs(est.value) < 3 * est.stderr

    def test_sawtooth_feedback_dominates_constants(self):
        payoff = "abs(abs(x) - 1)"
        s = ProblemSpec.build(terminal=payoff, n_t=50)
        bundle = solve_bsvie(s, field_anchors=[0])
        batches = [simulate_paths(c, s, 40_000, 7 + i) for i, c in enumerate(_controls(s, bundle))]
        est = mc_lower_bound(payoff, batches)
        fb = est.by_control["feedback(anchor=0)"]
        for name in ("lo", "hi"):
            assert fb[0] >= est.by_control[name][0] - 3 * fb[1]
        lattice = g_expectation(payoff, s.band, s.tgrid, s.xgrid, s.substeps)
        assert est.value <= lattice + 3 * est.stderr

    def test_empty_controls(self):
        with pytest.raises(ValueError):
            mc_lower_bound("x", [])


class TestKReconstruction:
    def test_classical_case_k_vanishes(self):
        s = ProblemSpec.build(generator="0.5*y", terminal="cos(x)", sigma_lo=1.0, sigma_hi=1.0, n_t=100, lipschitz=0.5)
        b = solve_bsvie(s, field_anchors=[0, 50])
        batch = simulate_paths(VolControl.constant(1.0, 100), s, 2000, 1)
        for i in (0, 50):
            assert np.max(np.abs(reconstruct_k_batch(b, batch, i))) < 2e-2

    def test_quadratic_identity(self, x2_bundle):
        batch = simulate_paths(_controls(SPEC, x2_bundle)[2], SPEC, 2000, 9)
        K = reconstruct_k_batch(x2_bundle, batch, 0)
        target = batch.quad_var.sum(axis=1) - 1.0
        assert np.max(np.abs(K - target)) < 1e-6
        assert np.all(K <= 1e-6)

    def test_sigma_hi_control_mean_zero(self, x2_bundle):
        batch = simulate_paths(VolControl.constant(1.0, SPEC.tgrid.n_t), SPEC, 5000, 4, increments="gaussian")
        K = reconstruct_k_batch(x2_bundle, batch, 0)
        assert abs(K.mean()) < 3 * K.std(ddof=1) / np.sqrt(K.size) + 1e-9

    def test_single_path_matches_batch(self, x2_bundle):
        batch = simulate_paths(VolControl.constant(0.5, SPEC.tgrid.n_t), SPEC, 20, 2)
        full = reconstruct_k_batch(x2_bundle, batch, 10)
        ks = reconstruct_k(x2_bundle, batch, 7, 10)
        assert ks.t_index == 10 and ks.path_id == 7
        assert ks.value == pytest.approx(full[7], abs=1e-13)
        assert len(k_samples(x2_bundle, batch, [0, 10])) == 40

    def test_terminal_anchor_is_interpolation_error_only(self, x2_bundle):
        batch = simulate_paths(VolControl.constant(0.5, SPEC.tgrid.n_t), SPEC, 20, 2)
        # Phi(X_T) minus the piecewise linear interpolant of x^2: at most dx^2/4
        K = reconstruct_k_batch(x2_bundle, batch, SPEC.tgrid.n_t)
        assert np.all(K <= 0) and np.all(K >= -SPEC.xgrid.dx ** 2 / 4)

    def test_index_errors(self, x2_bundle):
        batch = simulate_paths(VolControl.constant(0.5, SPEC.tgrid.n_t), SPEC, 5, 2)
        with pytest.raises(IndexError):
            reconstruct_k_batch(x2_bundle, batch, SPEC.tgrid.n_t + 1)
        sparse = solve_bsvie(SPEC, field_anchors=[0])
        with pytest.raises(KeyError):
            reconstruct_k_batch(sparse, batch, 3)


class TestBDG:
    def setup_method(self):
        n = SPEC.tgrid.n_t
        self.batches = [simulate_paths(c, SPEC, 20_000, 30 + i, increments="gaussian") for i, c in enumerate(_controls(SPEC))]
        self.n = n

    def test_zero_integrand(self):
        rep = bdg_diagnostic(0.0, 2.0, self.batches)
        for v in rep.values():
            assert v["sup_moment"] == 0.0 and v["qv_moment"] == 0.0 and v["ratio"] == 0.0

    def test_unit_integrand_ratio(self):
        rep = bdg_diagnostic(1.0, 2.0, self.batches)
        hi = rep["hi"]
        assert hi["ok"] and np.isfinite(hi["ratio"]) and hi["ratio"] >= 1.0
        assert hi["sup_moment"] >= rep["lo"]["sup_moment"]

    def test_field_integrand(self):
        field = np.ones((self.n, SPEC.xgrid.n_x))
        a = bdg_diagnostic(field, 2.0, self.batches, SPEC.xgrid)
        b = bdg_diagnostic(1.0, 2.0, self.batches)
        assert a["hi"]["sup_moment"] == pytest.approx(b["hi"]["sup_moment"])

    def test_bad_exponent(self):
        with pytest.raises(ValueError):
            bdg_diagnostic(1.0, 0.0, self.batches)


def test_export_csv(tmp_path, x2_bundle):
    batch = simulate_paths(VolControl.constant(1.0, SPEC.tgrid.n_t), SPEC, 3, 0)
    p = tmp_path / "paths.csv"
    export_batch_csv(batch, p, bundle=x2_bundle, max_paths=2)
    rows = list(csv.DictReader(open(p)))
    assert len(rows) == 2 * (SPEC.tgrid.n_t + 1)
    assert set(rows[0]) == {"path", "k", "dB", "dQV", "X", "K"}
    assert float(rows[0]["K"]) == 0.0
    last = rows[SPEC.tgrid.n_t]
    # under sigma_hi with +-1 shocks the running K at T is exactly <B>_T - T = 0
    assert abs(float(last["K"])) < 1e-9
