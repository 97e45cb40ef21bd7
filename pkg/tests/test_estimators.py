import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import binom, binomtest, poisson

from mcmsim.atomic import AtomicConstants
from mcmsim.estimators import (
    FitError,
    contrast_from_phase_spread,
    fit_double_gaussian,
    fit_exponential_decay,
    fit_inverse_shift,
    fit_linear_decay,
    fit_ramsey_fringe,
    larger_error,
    optimal_threshold,
    scale_dummy_interval,
    scale_dummy_rate,
    site_resolved_fringes,
    threshold_objective,
    wilson_interval,
    wrap_phase,
)
from mcmsim.lsq import levenberg_marquardt

PHASES = np.linspace(0, 2 * math.pi, 12, endpoint=False)


# ---------------------------------------------------------------- least squares

def test_lsq_recovers_linear_model_exactly():
    x = np.linspace(0, 1, 20)
    res = levenberg_marquardt(lambda p: p[0] + p[1] * x - (2 + 3 * x), [0, 0])
    assert res.params == pytest.approx([2, 3], abs=1e-8)
    assert res.converged


def test_lsq_respects_bounds():
    res = levenberg_marquardt(lambda p: np.array([p[0] - 5.0]), [0.0], bounds=([0.0], [1.0]))
    assert res.params[0] == pytest.approx(1.0)


def test_lsq_numeric_jacobian_matches_analytic():
    x = np.linspace(0, 3, 30)
    y = 1.7 * np.exp(-0.4 * x)
    f = lambda p: p[0] * np.exp(-p[1] * x) - y
    a = levenberg_marquardt(f, [1, 1])
    b = levenberg_marquardt(f, [1, 1], jac=lambda p: np.column_stack([np.exp(-p[1] * x),
                                                                      -p[0] * x * np.exp(-p[1] * x)]))
    assert a.params == pytest.approx(b.params, rel=1e-6)


# ---------------------------------------------------------------- histograms

def test_equal_gaussians_threshold_at_midpoint():
    t, _ = optimal_threshold(0.0, 3.0, 30.0, 3.0)
    assert t == pytest.approx(15.0, abs=1e-6)


def test_threshold_example_values():
    t, err = optimal_threshold(0.0, 2.5, 31.3, 6.2)
    assert t == pytest.approx(9.0, abs=1.0)
    assert err == pytest.approx(1.5e-4, rel=0.3)


@given(mu1=st.floats(10, 60), s0=st.floats(0.5, 8), s1=st.floats(0.5, 8))
def test_threshold_is_a_minimum(mu1, s0, s1):
    t, err = optimal_threshold(0.0, s0, mu1, s1)
    for sign in (-1, 1):
        for sig in (s0, s1):
            assert threshold_objective(t + sign * 0.5 * sig, 0.0, s0, mu1, s1) >= err - 1e-15


def test_double_gaussian_recovers_mixture():
    rng = np.random.default_rng(1)
    data = np.concatenate([rng.normal(0, 2.5, 30_000), rng.normal(31.3, 6.2, 30_000)])
    fit = fit_double_gaussian(data)
    assert fit.mu0 == pytest.approx(0, abs=0.1) and fit.mu1 == pytest.approx(31.3, abs=0.2)
    assert fit.sigma0 == pytest.approx(2.5, rel=0.03) and fit.sigma1 == pytest.approx(6.2, rel=0.03)
    assert fit.threshold == pytest.approx(9, abs=1)
    assert 0 <= fit.overlap_error <= 5e-4
    assert set(fit.errors) == {"amp0", "mu0", "sigma0", "amp1", "mu1", "sigma1"}
    assert fit.to_dict()["model"] == "double_gaussian"


def test_double_gaussian_from_histogram_and_prior_flag():
    rng = np.random.default_rng(2)
    data = np.concatenate([rng.normal(0, 2.5, 40_000), rng.normal(33.0, 6.2, 10_000)])
    edges = np.arange(-20, 80, 1.0)
    h, _ = np.histogram(data, edges)
    equal = fit_double_gaussian(h, edges)
    prior = fit_double_gaussian(h, edges, fitted_prior=True)
    assert equal.separation == pytest.approx(33.0, abs=0.5)
    assert prior.threshold > equal.threshold  # the heavier dark peak pushes the cut up
    with pytest.raises(ValueError):
        fit_double_gaussian(h, edges[:-1])


def test_double_gaussian_single_mode_fails():
    data = np.random.default_rng(3).normal(0, 2.5, 10_000)
    with pytest.raises(FitError):
        fit_double_gaussian(data)
    with pytest.raises(FitError):
        fit_double_gaussian(np.zeros(10))



def test_double_gaussian_is_poisson_maximum_likelihood():
    rng = np.random.default_rng(4)
    data = np.concatenate([rng.normal(1.0, 2.5, 2000), rng.normal(30.0, 6.0, 1500)])
    edges = np.arange(-15.0, 60.0, 1.0)
    h, _ = np.histogram(data, edges)
    fit = fit_double_gaussian(h, edges)

    def nll(p):
        a0, m0, w0, a1, m1, w1 = p
        lam = a0 * np.diff(ndtr((edges - m0) / w0)) + a1 * np.diff(ndtr((edges - m1) / w1))
        return -poisson.logpmf(h, np.maximum(lam, 1e-300)).sum()

    # oracle: direct minimization of the binned Poisson negative log-likelihood
    ref = minimize(nll, [2000, 1, 2.5, 1500, 30, 6], method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 40_000, "maxfev": 40_000}).x
    got = [fit.amp0, fit.mu0, fit.sigma0, fit.amp1, fit.mu1, fit.sigma1]
    assert got == pytest.approx(ref, rel=1e-4, abs=1e-4)

# ---------------------------------------------------------------- Wilson

def test_wilson_examples():
    assert wilson_interval(0, 20) == pytest.approx((0.0, 0.1611), abs=1e-4)
    assert wilson_interval(10, 100) == pytest.approx((0.0552, 0.1744), abs=1e-4)


def test_wilson_matches_scipy():
    for k, n in [(0, 20), (3, 17), (50, 100), (99, 100)]:
        ci = binomtest(k, n).proportion_ci(0.95, method="wilson")
        lo, hi = wilson_interval(k, n, z=1.959963984540054)
        assert (lo, hi) == pytest.approx((ci.low, ci.high), abs=1e-12)


@given(n=st.integers(1, 10_000), frac=st.floats(0, 1))
def test_wilson_contains_estimate(n, frac):
    k = int(round(frac * n))
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1


@given(n=st.integers(1, 5000))
def test_wilson_symmetric_at_half(n):
    lo, hi = wilson_interval(n, 2 * n)
    assert 0.5 - lo == pytest.approx(hi - 0.5, abs=1e-12)


def test_wilson_width_shrinks_as_inverse_sqrt():
    z = 1.96
    for n in (100, 400, 1600):
        lo, hi = wilson_interval(n // 2, n)
        exact = 2 * z * math.sqrt(0.25 / n + z * z / (4 * n * n)) / (1 + z * z / n)
        assert hi - lo == pytest.approx(exact, rel=1e-12)
    w = [np.subtract(*wilson_interval(n // 2, n)[::-1]) for n in (10**6, 4 * 10**6)]
    assert w[0] / w[1] == pytest.approx(2, rel=1e-5)


def test_wilson_rejects_bad_counts():
    with pytest.raises(ValueError):
        wilson_interval(1, 0)
    with pytest.raises(ValueError):
        wilson_interval(5, 4)


def test_larger_error():
    assert larger_error(0.1, (0.05, 0.2)) == pytest.approx(0.1)


# ---------------------------------------------------------------- dummy scaling

def test_scale_dummy_examples():
    assert scale_dummy_rate(0.04, 0.2) == pytest.approx(0.001)
    assert scale_dummy_rate(0.0, 0.2) == 0.0
    assert scale_dummy_rate(1.0, 50e-3) == pytest.approx(0.1)
    assert scale_dummy_interval((0.02, 0.06), 0.2) == pytest.approx((0.0005, 0.0015))
    with pytest.raises(ValueError):
        scale_dummy_rate(0.1, 0.0)


@given(rate=st.floats(0, 1), ratio=st.sampled_from([1, 2, 4, 8, 10, 40]))
def test_scale_dummy_round_trip(rate, ratio):
    assert scale_dummy_rate(rate * ratio, ratio * 5e-3) == pytest.approx(rate, rel=1e-15, abs=0)


# ---------------------------------------------------------------- decays

def test_exponential_constant_series():
    fit = fit_exponential_decay(np.arange(20), np.full(20, 0.8))
    assert fit["rate"] == pytest.approx(0.0, abs=1e-10)


def test_exponential_noiseless_recovery():
    n = np.arange(20)
    fit = fit_exponential_decay(n, np.exp(-0.01 * n))
    assert fit["rate"] == pytest.approx(0.0100, abs=1e-8)
    assert fit["amplitude"] == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        fit_exponential_decay([0, 1], [1, 0.9])
    with pytest.raises(ValueError):
        fit_exponential_decay([0, 1, 2], [1, 1.2, 0.9])



def test_exponential_binomial_mode_is_maximum_likelihood():
    rng = np.random.default_rng(5)
    idx, trials = np.arange(20), 500
    k = rng.binomial(trials, 0.95 * np.exp(-0.02 * idx))
    fit = fit_exponential_decay(idx, k / trials, n_trials=trials)

    def nll(p):
        return -binom.logpmf(k, trials, np.clip(p[0] * np.exp(-p[1] * idx), 1e-12, 1 - 1e-12)).sum()

    # oracle: direct minimization of the binomial negative log-likelihood
    ref = minimize(nll, [0.9, 0.01], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-12}).x
    assert [fit["amplitude"], fit["rate"]] == pytest.approx(ref, abs=2e-6)
    # errors are the inverse Fisher information at the optimum
    q = ref[0] * np.exp(-ref[1] * idx)
    J = np.column_stack([q / ref[0], -idx * q])
    cov = np.linalg.inv(J.T @ (J * (trials / (q * (1 - q)))[:, None]))
    assert fit.errors["rate"] == pytest.approx(math.sqrt(cov[1, 1]), rel=1e-3)
    with pytest.raises(ValueError):
        fit_exponential_decay(idx, k / trials, n_trials=0)

def test_linear_decay_examples():
    t = np.array([0.25, 0.5, 1, 1.5, 2])
    assert fit_linear_decay(t, np.ones(5))["rate"] == pytest.approx(0.0, abs=1e-12)
    assert fit_linear_decay(t, 1 - 0.03 * t)["rate"] == pytest.approx(0.030, abs=1e-12)
    assert fit_linear_decay(t, 1 - 0.03 * t, through_origin=True)["rate"] == pytest.approx(0.030, abs=1e-12)
    with pytest.raises(ValueError):
        fit_linear_decay([1, 1, 1], [1, 1, 1])


def test_linear_decay_matches_polyfit():
    rng = np.random.default_rng(4)
    t = np.linspace(0.1, 2, 9)
    y = 1 - 0.03 * t + rng.normal(0, 0.003, t.size)
    slope, _ = np.polyfit(t, 1 - y, 1)
    assert fit_linear_decay(t, y)["rate"] == pytest.approx(slope, rel=1e-10)


def test_inverse_shift_exact_recovery():
    d = np.array([15.0, 25.0, 40.0, 74.0])
    fit = fit_inverse_shift(d, 164 / d - 0.6)
    assert fit["coefficient"] == pytest.approx(164, abs=1e-9)
    assert fit["offset"] == pytest.approx(-0.6, abs=1e-11)
    assert 0.8 <= fit.extra["saturation"] <= 1.6
    with pytest.raises(ValueError):
        fit_inverse_shift([10, 10, 20], [1, 1, 1])
    with pytest.raises(ValueError):
        fit_inverse_shift([0, 10, 20], [1, 1, 1])


def test_inverse_shift_saturation_reference():
    gamma = AtomicConstants().gamma
    d = np.array([15.0, 25.0, 40.0, 74.0])
    c = 1.2 * gamma**2 * 5e-3 / (8 * 2 * math.pi * 1e6)
    assert fit_inverse_shift(d, c / d).extra["saturation"] == pytest.approx(1.2, rel=1e-9)


# ---------------------------------------------------------------- fringes

def test_fringe_noiseless_example():
    fit = fit_ramsey_fringe(PHASES, 0.5 + 0.486 * np.cos(PHASES - 1.59))
    assert fit.contrast == pytest.approx(0.972, abs=1e-9)
    assert fit.phase == pytest.approx(1.59, abs=1e-9)
    assert fit.offset == pytest.approx(0.5, abs=1e-12)
    assert fit.predict(1.59) == pytest.approx(0.986)


def test_fringe_flat_data():
    fit = fit_ramsey_fringe(PHASES, np.full(12, 0.5))
    assert fit.contrast == pytest.approx(0.0, abs=1e-9)
    assert fit.phase_err > 1.0


def test_fringe_recovery_with_binomial_noise():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(50):
        p = 0.5 + 0.4925 * np.cos(PHASES - 0.3)
        y = rng.binomial(500, p) / 500
        fit = fit_ramsey_fringe(PHASES, y, n_shots=500)
        hits += abs(fit.contrast - 0.985) <= 2 * fit.contrast_err
    assert hits >= 42  # ~95% of 50, with room for binomial scatter


def test_fringe_validation():
    with pytest.raises(ValueError):
        fit_ramsey_fringe([0, 1, 2], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        fit_ramsey_fringe(PHASES, np.zeros(11))


def test_wrap_phase_range():
    assert wrap_phase(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_site_fringes_identical_sites():
    p = 0.5 + 0.49 * np.cos(PHASES - 1.0)
    shots = np.full((5, 12), 1000.0)
    res = site_resolved_fringes(PHASES, np.tile(p * 1000, (5, 1)), shots)
    assert res.phase_std == pytest.approx(0.0, abs=1e-9)
    assert res.mean_phase == pytest.approx(1.0, abs=1e-9)
    assert res.mean_contrast == pytest.approx(0.98, abs=1e-9)


def test_site_fringes_spread_and_skips():
    rng = np.random.default_rng(6)
    phases_true = rng.normal(1.0, 0.14, 400)
    bright = np.array([1000 * (0.5 + 0.49 * np.cos(PHASES - ph)) for ph in phases_true])
    shots = np.full(bright.shape, 1000.0)
    shots[0] = 0
    res = site_resolved_fringes(PHASES, bright, shots)
    assert res.skipped == [0]
    assert res.phase_std == pytest.approx(np.std(phases_true[1:]), abs=1e-6)


def test_contrast_from_phase_spread_examples():
    assert contrast_from_phase_spread(0.0) == 1.0
    assert contrast_from_phase_spread(0.14) == pytest.approx(0.9902, abs=1e-4)
    assert contrast_from_phase_spread(0.05) == pytest.approx(0.99875, abs=1e-5)
    with pytest.raises(ValueError):
        contrast_from_phase_spread(-0.1)


def test_fit_results_serialize():
    d = fit_linear_decay([0, 1, 2], [1, 0.97, 0.94]).to_dict()
    assert d["model"] == "linear_decay" and "errors" in d and "residual_norm" in d
    f = fit_ramsey_fringe(PHASES, 0.5 + 0.4 * np.cos(PHASES)).to_dict()
    assert f["params"]["contrast"] == pytest.approx(0.8)
