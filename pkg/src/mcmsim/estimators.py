"""Statistical procedures: histogram thresholding, binomial intervals, decay,
fringe and regression fits.

Every fitter returns an object with ``to_dict()`` giving the model name,
parameters, their standard errors and the residual norm.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from .atomic import AtomicConstants, saturation_from_coefficient
from .lsq import levenberg_marquardt

MIN_HISTOGRAM_SAMPLES = 500


class FitError(RuntimeError):
    """The data cannot support the requested model."""


@dataclass
class FitResult:
    model: str
    params: dict
    errors: dict
    residual_norm: float
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self) -> dict:
        return {"model": self.model, "params": dict(self.params), "errors": dict(self.errors),
                "residual_norm": self.residual_norm, **self.extra}


# ---------------------------------------------------------------- histograms

@dataclass
class GaussianPairFit:
    mu0: float
    sigma0: float
    amp0: float
    mu1: float
    sigma1: float
    amp1: float
    threshold: float
    overlap_error: float
    residual_norm: float = 0.0
    errors: dict = field(default_factory=dict)  # standard errors of mu/sigma/amp

    @property
    def separation(self) -> float:
        return self.mu1 - self.mu0

    def to_dict(self) -> dict:
        return {"model": "double_gaussian", **asdict(self)}


def threshold_objective(t, mu0, sigma0, mu1, sigma1, w0=0.5, w1=0.5):
    """Weighted tail mass on the wrong side of ``t``."""
    return w0 * ndtr(-(t - mu0) / sigma0) + w1 * ndtr(-(mu1 - t) / sigma1)


def optimal_threshold(mu0, sigma0, mu1, sigma1, w0=0.5, w1=0.5) -> tuple[float, float]:
    res = minimize_scalar(lambda t: threshold_objective(t, mu0, sigma0, mu1, sigma1, w0, w1),
                          bounds=(mu0, mu1), method="bounded", options={"xatol": 1e-10})
    return float(res.x), float(res.fun)


def fit_double_gaussian(data, edges=None, bin_width: float = 1.0, min_samples: int = MIN_HISTOGRAM_SAMPLES,
                        fitted_prior: bool = False) -> GaussianPairFit:
    """Fit two Gaussians to a count histogram and pick a threshold.

    ``data`` holds raw per-site counts, or histogram bin heights when
    ``edges`` is given. Bin heights are treated as Poisson counts (maximum
    likelihood via reweighted least squares). Amplitudes are areas in
    samples. The threshold minimizes the equal-area tail overlap unless
    ``fitted_prior`` weights each tail by its fitted amplitude.
    """
    if edges is None:
        x = np.asarray(data, dtype=float).ravel()
        x = x[np.isfinite(x)]
        if x.size == 0:
            raise FitError("no samples")
        edges = np.arange(x.min() - bin_width, x.max() + 2 * bin_width, bin_width)
        h, edges = np.histogram(x, edges)
    else:
        h = np.asarray(data, dtype=float)
        edges = np.asarray(edges, dtype=float)
        if edges.size != h.size + 1:
            raise ValueError("edges must have one more entry than the histogram")
    h = h.astype(float)
    c = 0.5 * (edges[1:] + edges[:-1])
    total = h.sum()
    if total < min_samples:
        raise FitError(f"need at least {min_samples} samples, got {int(total)}")

    def moments(mask):
        w = h[mask]
        if w.sum() == 0:
            return 0.0, 0.0, 0.0
        m = float(np.average(c[mask], weights=w))
        return float(w.sum()), m, float(np.sqrt(np.average((c[mask] - m) ** 2, weights=w)))

    # two-means split for starting values
    occupied = c[h > 0]
    cut = 0.5 * (occupied.min() + occupied.max())
    for _ in range(100):
        n_lo, m_lo, _ = moments(c < cut)
        n_hi, m_hi, _ = moments(c >= cut)
        if n_lo == 0 or n_hi == 0:
            break
        new = 0.5 * (m_lo + m_hi)
        if abs(new - cut) < 1e-9:
            break
        cut = new
    n_lo, m_lo, s0 = moments(c < cut)
    n_hi, m_hi, s1 = moments(c >= cut)
    if min(n_lo, n_hi) < max(10, 0.01 * total):
        raise FitError("histogram has a single mode")
    s0, s1 = max(s0, 1e-3), max(s1, 1e-3)
    if m_hi - m_lo < 2 * (s0 + s1):
        raise FitError("modes are not resolved")

    def model(p):
        # expected counts per bin, each Gaussian integrated over the bin
        a0, m0, w0, a1, m1, w1 = p
        return a0 * np.diff(ndtr((edges - m0) / w0)) + a1 * np.diff(ndtr((edges - m1) / w1))

    # Weighted least squares with variances taken from the previous model
    # iterate; the fixed point solves the Poisson likelihood equations, which
    # avoids the width bias of weighting by the observed counts.
    lower = [0, -np.inf, 1e-6, 0, -np.inf, 1e-6]
    sig = np.sqrt(np.maximum(h, 1.0))
    p = np.array([n_lo, m_lo, s0, n_hi, m_hi, s1])
    for _ in range(20):
        res = levenberg_marquardt(lambda q, sig=sig: (model(q) - h) / sig, p, bounds=(lower, [np.inf] * 6),
                                  absolute_sigma=True)
        step = np.max(np.abs(res.params - p) / np.maximum(np.abs(res.params), 1e-9))
        p = res.params
        sig = np.sqrt(np.maximum(model(p), 1e-9))
        if step < 1e-7:
            break
    a0, m0, w0, a1, m1, w1 = res.params
    e = [float(v) for v in res.stderr]
    if m1 < m0:
        a0, m0, w0, a1, m1, w1 = a1, m1, w1, a0, m0, w0
        e = e[3:] + e[:3]
    if not m1 > m0:
        raise FitError("fit collapsed onto a single mode")
    weights = (a0 / (a0 + a1), a1 / (a0 + a1)) if fitted_prior else (0.5, 0.5)
    t, err = optimal_threshold(m0, w0, m1, w1, *weights)
    errors = dict(zip(("amp0", "mu0", "sigma0", "amp1", "mu1", "sigma1"), e))
    return GaussianPairFit(float(m0), float(w0), float(a0), float(m1), float(w1), float(a1), t, err,
                           res.residual_norm, errors)


# ---------------------------------------------------------------- binomial

def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    p = successes / trials
    z2 = z * z
    denom = 1 + z2 / trials
    centre = (p + z2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials**2)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


def larger_error(estimate: float, interval: tuple[float, float]) -> float:
    """The larger of the two interval sides, as shown in error-rate tables."""
    return max(estimate - interval[0], interval[1] - estimate)


def scale_dummy_rate(measured_prob: float, dummy_duration: float, default_duration: float = 5e-3) -> float:
    """Per-default-image probability from a long dummy image."""
    if dummy_duration <= 0 or default_duration <= 0:
        raise ValueError("durations must be positive")
    return measured_prob * (default_duration / dummy_duration)


def scale_dummy_interval(interval, dummy_duration: float, default_duration: float = 5e-3) -> tuple[float, float]:
    return tuple(scale_dummy_rate(v, dummy_duration, default_duration) for v in interval)


# ---------------------------------------------------------------- decays

def fit_exponential_decay(index, fraction, sigma=None, n_trials=None) -> FitResult:
    """Fit A*exp(-rate*index). Returns params ``amplitude`` and ``rate``.

    ``sigma`` gives absolute standard errors per point. With ``n_trials``
    the points are binomial fractions instead: weights come from the model's
    own binomial variance, refined until the fit settles (the maximum
    likelihood solution), and errors are absolute.
    """
    n = np.asarray(index, dtype=float)
    y = np.asarray(fraction, dtype=float)
    if n.size < 3 or n.size != y.size:
        raise ValueError("need at least three (index, fraction) points")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("fractions must lie in [0, 1]")
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    pos = y > 0
    if pos.sum() >= 2:
        slope, icpt = np.polyfit(n[pos], np.log(y[pos]), 1)
        p0 = [math.exp(icpt), -slope]
    else:
        p0 = [max(y.max(), 1e-3), 0.0]

    def resid(p, w):
        return (p[0] * np.exp(-p[1] * n) - y) * w

    def jac(p, w):
        e = np.exp(-p[1] * n)
        return np.column_stack([e, -p[0] * n * e]) * w[:, None]

    if n_trials is None:
        res = levenberg_marquardt(lambda p: resid(p, w), p0, jac=lambda p: jac(p, w),
                                  absolute_sigma=sigma is not None)
    else:
        trials = np.broadcast_to(np.asarray(n_trials, dtype=float), y.shape)
        if np.any(trials <= 0):
            raise ValueError("n_trials must be positive")
        p = np.array(p0)
        for _ in range(20):
            q = np.clip(p[0] * np.exp(-p[1] * n), 0.5 / trials, 1 - 0.5 / trials)
            w = np.sqrt(trials / (q * (1 - q)))
            res = levenberg_marquardt(lambda p, w=w: resid(p, w), p, jac=lambda p, w=w: jac(p, w),
                                      absolute_sigma=True)
            step = np.max(np.abs(res.params - p) / np.maximum(np.abs(res.params), 1e-12))
            p = res.params
            if step < 1e-9:
                break
    err = res.stderr
    return FitResult("exponential_decay", {"amplitude": float(res.params[0]), "rate": float(res.params[1])},
                     {"amplitude": float(err[0]), "rate": float(err[1])}, res.residual_norm)


def _ols(x, y, through_origin=False, sigma=None):
    """Weighted linear least squares; returns (params, stderr, residual norm)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = x[:, None] if through_origin else np.column_stack([np.ones_like(x), x])
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, float)
    Aw, yw = A * w[:, None], y * w
    if np.linalg.matrix_rank(Aw) < A.shape[1]:
        raise ValueError("degenerate design: abscissae are not distinct")
    beta, *_ = np.linalg.lstsq(Aw, yw, rcond=None)
    r = yw - Aw @ beta
    cov = np.linalg.inv(Aw.T @ Aw)
    if sigma is None:
        dof = max(len(y) - A.shape[1], 1)
        cov = cov * float(r @ r) / dof
    return beta, np.sqrt(np.diag(cov)), float(np.linalg.norm(r))


def fit_linear_decay(times, relative_contrast, sigma=None, through_origin: bool = False) -> FitResult:
    """Slope of (1 - relative contrast) against hold time."""
    t = np.asarray(times, float)
    if t.size < 3:
        raise ValueError("need at least three points")
    loss = 1.0 - np.asarray(relative_contrast, float)
    beta, err, norm = _ols(t, loss, through_origin, sigma)
    if through_origin:
        return FitResult("linear_decay", {"rate": float(beta[0])}, {"rate": float(err[0])}, norm)
    return FitResult("linear_decay", {"intercept": float(beta[0]), "rate": float(beta[1])},
                     {"intercept": float(err[0]), "rate": float(err[1])}, norm)


def fit_inverse_shift(shifts_mhz, phases, sigma=None, saturation_reference: tuple | None = None) -> FitResult:
    """Fit phase = C / shift + offset; also reports the saturation implied by C.

    ``saturation_reference`` is (gamma, duration) for the inversion; it
    defaults to the nominal linewidth and the 5 ms image.
    """
    d = np.asarray(shifts_mhz, float)
    if np.unique(d).size < 3:
        raise ValueError("need at least three distinct shifts")
    if np.any(d == 0):
        raise ValueError("shifts must be non-zero")
    beta, err, norm = _ols(1.0 / d, phases, sigma=sigma)
    gamma, duration = saturation_reference or (AtomicConstants().gamma, 5e-3)
    coefficient = float(beta[1])
    s = saturation_from_coefficient(coefficient, gamma, duration)
    s_err = float(err[1]) * s / coefficient if coefficient else math.inf
    return FitResult("inverse_shift", {"coefficient": coefficient, "offset": float(beta[0])},
                     {"coefficient": float(err[1]), "offset": float(err[0])}, norm,
                     extra={"saturation": s, "saturation_error": abs(s_err)})


# ---------------------------------------------------------------- fringes

@dataclass
class FringeFit:
    contrast: float
    phase: float
    offset: float
    contrast_err: float
    phase_err: float
    offset_err: float
    residual_norm: float = 0.0

    def predict(self, phi):
        return self.offset + 0.5 * self.contrast * np.cos(np.asarray(phi) - self.phase)

    def to_dict(self) -> dict:
        return {"model": "ramsey_fringe",
                "params": {"contrast": self.contrast, "phase": self.phase, "offset": self.offset},
                "errors": {"contrast": self.contrast_err, "phase": self.phase_err, "offset": self.offset_err},
                "residual_norm": self.residual_norm}


def wrap_phase(phi):
    return (np.asarray(phi) + math.pi) % (2 * math.pi) - math.pi


def fit_ramsey_fringe(phases, bright_fractions, weights=None, n_shots=None) -> FringeFit:
    """Weighted least squares on offset + (contrast/2) cos(phi - phase).

    ``weights`` are inverse standard errors per point. With ``n_shots`` the
    binomial standard error is used instead and parameter errors are
    absolute. Contrast is constrained to [0, 1].
    """
    phi = np.asarray(phases, float)
    y = np.asarray(bright_fractions, float)
    if phi.size != y.size:
        raise ValueError("phases and fractions differ in length")
    if np.unique(np.round(wrap_phase(phi), 12)).size < 4:
        raise ValueError("need at least four distinct phases")
    absolute = False
    if n_shots is not None:
        n = np.broadcast_to(np.asarray(n_shots, float), y.shape)
        if np.any(n <= 0):
            raise ValueError("n_shots must be positive")
        pc = np.clip(y, 0.5 / n, 1 - 0.5 / n)
        w = 1.0 / np.sqrt(pc * (1 - pc) / n)
        absolute = True
    elif weights is not None:
        w = np.asarray(weights, float)
    else:
        w = np.ones_like(y)

    # starting values: Fourier component at the scan period
    A = np.column_stack([np.ones_like(phi), np.cos(phi), np.sin(phi)])
    (_, a, b), *_ = np.linalg.lstsq(A * w[:, None], y * w, rcond=None)
    p0 = [float(np.mean(y)), float(np.clip(y.max() - y.min(), 0, 1)), math.atan2(b, a)]

    def resid(p):
        return (p[0] + 0.5 * p[1] * np.cos(phi - p[2]) - y) * w

    def jac(p):
        c, s = np.cos(phi - p[2]), np.sin(phi - p[2])
        return np.column_stack([np.ones_like(phi), 0.5 * c, 0.5 * p[1] * s]) * w[:, None]

    res = levenberg_marquardt(resid, p0, jac=jac, bounds=([-np.inf, 0, -np.inf], [np.inf, 1, np.inf]),
                              absolute_sigma=absolute)
    off, con, ph = res.params
    err = res.stderr
    if con <= 1e-12:
        err[2] = math.inf  # phase is unconstrained without a fringe
    return FringeFit(float(con), float(wrap_phase(ph)), float(off), float(err[1]), float(err[2]),
                     float(err[0]), res.residual_norm)


@dataclass
class SiteFringes:
    fits: list  # FringeFit or None per site
    skipped: list
    mean_contrast: float
    phase_std: float
    mean_phase: float

    def to_dict(self) -> dict:
        return {"model": "site_resolved_fringes", "mean_contrast": self.mean_contrast,
                "phase_std": self.phase_std, "mean_phase": self.mean_phase, "skipped": list(self.skipped),
                "sites": [None if f is None else f.to_dict() for f in self.fits]}


def site_resolved_fringes(phases, bright, shots, min_points: int = 8) -> SiteFringes:
    """Fit each site's fringe.

    ``bright`` and ``shots`` are (sites, phases) counts of bright outcomes and
    of post-selected shots. Sites with fewer than ``min_points`` populated
    phase points are skipped. The phase spread is the standard deviation of
    fitted phases about their circular mean.
    """
    phases = np.asarray(phases, float)
    bright = np.asarray(bright, float)
    shots = np.asarray(shots, float)
    fits, skipped = [], []
    for s in range(bright.shape[0]):
        ok = shots[s] > 0
        if ok.sum() < min_points:
            fits.append(None)
            skipped.append(s)
            continue
        fits.append(fit_ramsey_fringe(phases[ok], bright[s, ok] / shots[s, ok], n_shots=shots[s, ok]))
    good = [f for f in fits if f is not None]
    if not good:
        return SiteFringes(fits, skipped, math.nan, math.nan, math.nan)
    ph = np.array([f.phase for f in good])
    centre = math.atan2(np.sin(ph).mean(), np.cos(ph).mean())
    dev = wrap_phase(ph - centre)
    return SiteFringes(fits, skipped, float(np.mean([f.contrast for f in good])),
                       float(np.std(dev)), float(centre))


def contrast_from_phase_spread(sigma: float) -> float:
    """Ensemble contrast factor exp(-sigma^2/2) for a Gaussian phase spread."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return math.exp(-0.5 * sigma * sigma)
