import math

import numpy as np
import pytest

from spdelab import engine as eng
from spdelab import hjmm
from spdelab.errors import ContractViolation, HypothesisViolated
from spdelab.noise import MarkSampler, POINT_MASS


def test_lf_bound_example_values():
    assert hjmm.lf_bound(1.0, 0.0, 1.0 / 3.0, 3.0, math.inf) == pytest.approx(0.780, abs=1e-3)
    v = hjmm.lf_bound(1.0, 0.0, 1.0 / 3.0, 3.0, 1000.0)
    assert v < 1.0
    assert hjmm.lf_bound(0.0, 0.0, 1.0 / 3.0, 3.0, 10.0) == 0.0


def test_lf_bound_reproducible_to_last_bit():
    a = hjmm.lf_bound(1.0, 0.0, 1.0 / 3.0, 3.0, 1000.0)
    b = hjmm.lf_bound(1.0, 0.0, 1.0 / 3.0, 3.0, 1000.0)
    assert a == b


def test_lf_bound_monotone_in_beta_prime():
    vals = [hjmm.lf_bound(1.0, 0.0, 1.0 / 3.0, 3.0, bp) for bp in (5.0, 50.0, 500.0)]
    assert vals[0] > vals[1] > vals[2]


def test_lf_bound_contracts():
    with pytest.raises(ContractViolation):
        hjmm.lf_bound(1.0, 0.0, 0.5, 3.0, 2.0)


def test_example_volatility_vanishes_on_constants():
    sp = hjmm.forward_space(3.0, n=512)
    assert np.all(hjmm.example_volatility(sp, np.full(sp.dim, 4.2)) == 0.0)


def test_example_volatility_saturated_branch():
    sp = hjmm.forward_space(1.0, x_max=20.0, n=2001)
    h = -2.0 * sp.grid     # |h'| = 2 dominates e^{-y} everywhere
    got = hjmm.example_volatility(sp, h)
    want = np.exp(-sp.grid) / sp.beta
    assert np.abs(got[:-1] - want[:-1]).max() <= 1e-4


def test_example_volatility_norm_bound():
    sp = hjmm.forward_space(3.0)
    gen = np.random.Generator(np.random.Philox(5))
    worst = 0.0
    for _ in range(100):
        amps = gen.standard_normal(4) * 0.1
        decays = 2.0 + 3.0 * gen.random(4)
        h = 0.03 + sum(a * np.exp(-b * sp.grid) for a, b in zip(amps, decays))
        worst = max(worst, sp.norm2(hjmm.example_volatility(sp, h)))
    assert worst <= (1.0 / sp.beta) * 1.01


def test_drift_zero_volatility():
    sp = hjmm.forward_space(2.0, n=256)
    vol = hjmm.HjmmVolatility(sigma_factors=(), M=0.0)
    rows = hjmm.hjmm_drift_rows(vol, None, sp, np.zeros((3, sp.dim)))
    assert np.all(rows == 0.0)


def test_drift_closed_form_single_factor():
    sp = hjmm.forward_space(3.0)
    fac = np.exp(-sp.beta * sp.grid)
    vol = hjmm.HjmmVolatility(sigma_factors=(lambda X: np.broadcast_to(fac, X.shape),),
                              M=1.0)
    drift, resid = hjmm.hjmm_drift(vol, None, sp, np.zeros(sp.dim))
    want = np.exp(-3.0 * sp.grid) * (1.0 - np.exp(-3.0 * sp.grid)) / 3.0
    assert np.abs(drift - want).max() <= 1e-4
    assert resid <= 1e-4


def test_drift_vanishes_on_constant_curves_with_example_volatility():
    sp = hjmm.forward_space(3.0, n=512)
    vol = hjmm.hjmm_example_volatility(sp)
    drift, resid = hjmm.hjmm_drift(vol, None, sp, np.full(sp.dim, 0.07))
    assert np.all(drift == 0.0)
    assert resid == 0.0


def test_drift_jump_part_matches_direct_evaluation():
    sp = hjmm.forward_space(2.0, n=256)
    shape = np.exp(-2.0 * sp.grid)
    shape[-1] = 0.0

    def gamma(X, M):
        return M[:, :1] * shape

    vol = hjmm.HjmmVolatility(sigma_factors=(), gamma=gamma,
                              phi=lambda m: np.abs(m[:, 0]) * 0.51, M=1.0)
    mu = hjmm.FiniteMarkMeasure(rate=1.5, marks=MarkSampler(POINT_MASS,
                                                            point=np.array([0.3])))
    h = 0.05 + 0.02 * np.exp(-3.0 * sp.grid)
    drift, _ = hjmm.hjmm_drift(vol, mu, sp, h)
    g = 0.3 * shape
    expo = -hjmm.cumtrapz_rows(g[None, :], sp.dx)[0]
    want = -1.5 * g * np.expm1(expo)
    assert np.abs(drift - want).max() <= 1e-12


def test_drift_jump_exponent_guard():
    sp = hjmm.forward_space(2.0, n=256)

    def gamma(X, M):
        return np.broadcast_to(M[:, :1] * 40.0, X.shape)

    vol = hjmm.HjmmVolatility(sigma_factors=(), gamma=gamma,
                              phi=lambda m: np.abs(m[:, 0]) * 1e-6, M=1.0)
    mu = hjmm.FiniteMarkMeasure(rate=1.0, marks=MarkSampler(POINT_MASS,
                                                            point=np.array([1.0])))
    with pytest.raises(HypothesisViolated):
        hjmm.hjmm_drift(vol, mu, sp, np.zeros(sp.dim))


def test_drift_lipschitz_audit_against_bound():
    sp = hjmm.forward_space(3.0)
    vol = hjmm.hjmm_example_volatility(sp, beta_prime=1000.0)
    l_f = hjmm.lf_bound(vol.L_sigma, vol.L_gamma, vol.M, sp.beta, vol.beta_prime)
    gen = np.random.Generator(np.random.Philox(77))
    worst = 0.0
    for _ in range(200):
        amps = gen.standard_normal((2, 3)) * 0.1
        decays = 2.0 + 3.0 * gen.random((2, 3))
        h1 = 0.05 + sum(a * np.exp(-b * sp.grid) for a, b in zip(amps[0], decays[0]))
        h2 = 0.05 + sum(a * np.exp(-b * sp.grid) for a, b in zip(amps[1], decays[1]))
        f1 = hjmm.hjmm_drift_rows(vol, None, sp, h1[None, :])[0]
        f2 = hjmm.hjmm_drift_rows(vol, None, sp, h2[None, :])[0]
        gap = sp.norm(h1 - h2)
        if gap > 0:
            worst = max(worst, sp.norm(f1 - f2) / gap)
    assert worst <= math.sqrt(l_f) * 1.05


def test_audit_volatility_passes_and_fails():
    sp = hjmm.forward_space(3.0, n=512)
    vol = hjmm.hjmm_example_volatility(sp)
    probes = [0.05 + 0.03 * np.exp(-2.0 * sp.grid), np.full(sp.dim, 0.01)]
    rep = hjmm.audit_volatility(vol, sp, probes)
    assert rep["terminal_max"] == 0.0
    lying = hjmm.HjmmVolatility(sigma_factors=vol.sigma_factors, M=1e-6)
    with pytest.raises(HypothesisViolated):
        hjmm.audit_volatility(lying, sp, probes)


def test_constant_curve_is_stationary_point():
    sp = hjmm.forward_space(3.0, n=512)
    vol = hjmm.hjmm_example_volatility(sp, beta_prime=1000.0)
    sc, _ = hjmm.hjmm_scenario(sp, vol)
    c = np.full(sp.dim, 0.04)
    ens = eng.simulate_ensemble(sc, c, sp.dx, 200, 8, 12, [200 * sp.dx])
    assert np.array_equal(ens.states[-1], np.tile(c, (8, 1)))


def test_contraction_margin_hypothesis_guard():
    sp = hjmm.forward_space(1.0, n=256)
    vol = hjmm.hjmm_example_volatility(sp, beta_prime=1000.0)
    with pytest.raises(HypothesisViolated):
        hjmm.hjmm_ergodicity_experiment(sp, vol, np.full(sp.dim, 0.05), horizon=1.0,
                                        n_traj=4, seed=1)


def test_pure_transport_decays_at_least_at_beta():
    sp = hjmm.forward_space(3.0, n=1024)
    vol = hjmm.HjmmVolatility(sigma_factors=(), M=0.0, vanishing_at_constants=True)
    h0 = 0.05 + 0.04 * np.exp(-2.0 * sp.grid)
    rep = hjmm.hjmm_ergodicity_experiment(sp, vol, h0, horizon=3.0, n_traj=1,
                                          seed=3, snapshot_spacing=0.25)
    # deterministic transport: E||X_t - h(inf)||^2 = ||S(t) P0 h0||^2, rate >= beta
    assert rep.fitted_rate >= sp.beta * 0.95
    assert rep.long_rate_max_dev == 0.0


def test_ergodicity_experiment_small_scale():
    sp = hjmm.forward_space(3.0, n=512)
    vol = hjmm.hjmm_example_volatility(sp, beta_prime=1000.0)
    h0 = 0.05 + 0.04 * np.exp(-2.0 * sp.grid)
    rep = hjmm.hjmm_ergodicity_experiment(sp, vol, h0, horizon=5.0, n_traj=256, seed=9)
    assert all(s == "pass" for _, s, _ in rep.verdicts)
    assert rep.fitted_rate >= 0.85 * rep.margin
    assert rep.long_rate_max_dev == 0.0


def test_w2_mode_reports_rate():
    # volatility NOT vanishing at constants: constant shift of the example factor
    sp = hjmm.forward_space(3.0, n=512)
    base = np.exp(-3.0 * sp.grid)
    base[-1] = 0.0

    def factor(X):
        return hjmm.example_volatility_rows(sp, X) + 0.02 * base

    vol = hjmm.HjmmVolatility(sigma_factors=(factor,), M=1.2 / sp.beta, L_sigma=1.0,
                              L_gamma=0.0, beta_prime=1000.0,
                              vanishing_at_constants=False)
    h0 = 0.05 + 0.02 * np.exp(-2.0 * sp.grid)
    rep = hjmm.hjmm_ergodicity_experiment(sp, vol, h0, horizon=6.0, n_traj=512,
                                          seed=10)
    assert rep.mode == "w2"
    assert rep.w2_pairs is not None and len(rep.w2_pairs) == len(rep.times) - 1
    assert rep.long_rate_max_dev == 0.0


def test_forward_curve_decomposition_is_exact():
    sp = hjmm.forward_space(2.0, n=128)
    vals = 0.04 + 0.02 * np.exp(-2.5 * sp.grid)
    curve = hjmm.ForwardCurve(sp, vals)
    recomposed = curve.detrended() + curve.long_rate
    assert np.array_equal(recomposed, vals)
    assert curve.long_rate == vals[-1]
    assert np.isfinite(curve.norm())
