"""Monte Carlo formation of state-selective images.

Non-hidden atoms are Born-sampled against the imaged state and projected;
bright ones scatter, may be lost or flip, and show up as Poisson photons on
top of Gaussian camera noise. Hidden atoms are never projected: they pick up
the light-shift phase and a small coherence loss from residual scattering.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .atomic import (
    DEFAULT_PHASE_OFFSET,
    AtomicConstants,
    ImagingParams,
    ToneLedger,
    default_tone_ledger,
    excess_loss_probability,
    expected_image_loss,
    heating_loss_probability,
    hidden_scatter_probability,
    light_shift_phase,
    spin_flip_budget,
    vacuum_loss_probability,
)
from .qubits import (
    DETUNING_JITTER_HZ,
    GRADIENT_HZ_PER_SITE,
    ArrayState,
    empty_array,
    make_roles,
    sample_detunings,
)
from .rng import as_trial_rngs

DEFAULT_THRESHOLD = 9.0
DEAD_TIME_S = 21e-3


@dataclass(frozen=True)
class CameraModel:
    """Per-site integrated counts in photon units, background-subtracted.

    ``bright_mean`` is the display-unit peak of a default image; collected
    photons are scaled onto it, so it sets the camera gain.
    """

    background_mean: float = 0.0
    background_std: float = 2.5
    bright_mean: float = 31.3
    bright_std_extra: float = 0.0


@dataclass
class ImageFrame:
    target_state: int
    counts: np.ndarray  # (trials, sites)
    outcome: np.ndarray  # truth: projected into the imaged state
    photons: np.ndarray  # collected photons
    lost: np.ndarray
    spin_flipped: np.ndarray
    hidden: np.ndarray
    present: np.ndarray  # occupancy before the image

    @property
    def n_trials(self) -> int:
        return self.counts.shape[0]

    def rows(self, trial_offset: int = 0, image_index: int = 0):
        for t in range(self.n_trials):
            for s in range(self.counts.shape[1]):
                yield (
                    trial_offset + t, image_index, s, repr(float(self.counts[t, s])),
                    int(self.present[t, s]), int(self.hidden[t, s]), int(self.outcome[t, s]),
                    int(self.photons[t, s]), int(self.lost[t, s]), int(self.spin_flipped[t, s]),
                )


FRAME_HEADER = ("trial", "image", "site", "counts", "present", "hidden", "bright", "photons", "lost", "spin_flipped")


def write_frames(frames, fh) -> None:
    """Delimited export: one row per (trial, image_index, site). ``frames`` yields
    (trial_offset, image_index, ImageFrame)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(FRAME_HEADER)
    for offset, index, frame in frames:
        w.writerows(frame.rows(offset, index))


def initialize_array(dims, fill_prob, roles=None, rng=None, *, gradient_hz_per_site: float = GRADIENT_HZ_PER_SITE,
                     jitter_hz: float = DETUNING_JITTER_HZ) -> ArrayState:
    """Stochastically loaded array with every atom pumped to |1>.

    ``fill_prob`` is a scalar or a mapping from role to fill probability.
    """
    roles = make_roles(dims) if roles is None else np.asarray(roles, dtype=np.int8)
    if isinstance(fill_prob, dict):
        probs = np.array([fill_prob.get(int(r), fill_prob.get(r, 0.0)) for r in roles], dtype=float)
    else:
        probs = np.full(roles.shape, float(fill_prob))
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("fill probability must be in [0, 1]")
    rngs = as_trial_rngs(rng if rng is not None else np.random.default_rng())
    n_trials = len(rngs)
    out = empty_array(dims, roles, n_trials)
    out.present = rngs.random(out.n_sites) < probs
    out.p1 = out.present.astype(float)
    out.detuning_hz = sample_detunings(dims, rngs, n_trials, gradient_hz_per_site, jitter_hz)
    return out


def _budgets(tones, params, constants):
    if tones is not None:
        b = spin_flip_budget(tones, params.saturation, params.target_state, constants,
                             duration_s=params.duration_s, include_raman=False,
                             default_duration_s=params.default_duration_s)
        return b, b
    out = []
    for mcm in (False, True):
        ledger = default_tone_ledger(params.target_state, mcm=mcm, constants=constants)
        out.append(spin_flip_budget(ledger, params.saturation, params.target_state, constants,
                                    duration_s=params.duration_s, include_raman=False,
                                    default_duration_s=params.default_duration_s))
    return tuple(out)


def simulate_image(array: ArrayState, target_state: int, params: ImagingParams | None = None,
                   camera: CameraModel = CameraModel(), constants: AtomicConstants = AtomicConstants(),
                   rng=None, tones: ToneLedger | None = None,
                   phase_offset: float = DEFAULT_PHASE_OFFSET,
                   hidden_scatter: bool = True,
                   offset_reference_mhz: float | None = None) -> tuple[ArrayState, ImageFrame]:
    """Image ``target_state`` once.

    Without an explicit ``tones`` ledger, trials with any hidden site use the
    MCM ledger and the rest the base ledger. ``hidden_scatter=False`` switches
    off residual scattering on hidden sites, leaving only the coherent phase.

    With ``offset_reference_mhz`` the constant phase offset also scales as
    reference/shift on each site, so the whole imprinted phase follows the
    local hiding shift while the array mean keeps the inverse law plus offset.
    """
    if target_state not in (0, 1):
        raise ValueError("target_state must be 0 or 1")
    if params is None:
        params = ImagingParams(target_state=target_state)
    elif params.target_state != target_state:
        params = replace(params, target_state=target_state)
    B, S = array.present.shape
    rngs = as_trial_rngs(rng, B)
    u_born, u_loss, u_vac, u_flip = (rngs.random(S) for _ in range(4))
    z_bg, z_extra = rngs.normal(S), rngs.normal(S)

    present = array.present
    hidden = present & array.hiding_mask
    imaged = present & ~array.hiding_mask
    p_target = array.p1 if target_state == 1 else 1.0 - array.p1
    bright = imaged & (u_born < p_target)
    dark = imaged & ~bright

    n_mean = params.mean_collected_photons * params.duration_ratio
    shift = np.where(hidden, array.hide_shift_mhz, 1e9)  # finite stand-in off hidden sites
    p_hidden = np.where(hidden, hidden_scatter_probability(params, constants, shift), 0.0)
    if not hidden_scatter:
        p_hidden = np.zeros_like(p_hidden)
    lam = np.where(bright, n_mean, 0.0) + p_hidden * p_target * constants.collection_efficiency
    photons = rngs.poisson(lam).astype(np.int64)

    gain = camera.bright_mean / params.mean_collected_photons
    counts = (camera.background_mean + camera.background_std * z_bg + gain * photons
              + camera.bright_std_extra * z_extra * bright)

    p_loss = (photons * constants.loss_per_collected_photon
              + photons * sum(constants.branch_ratios()) / constants.collection_efficiency
              + heating_loss_probability(params, constants)
              + excess_loss_probability(params))
    lost = bright & (u_loss < p_loss)
    lost |= present & (u_vac < vacuum_loss_probability(params.duration_s, constants))

    base, mcm = _budgets(tones, params, constants)
    mcm_trial = hidden.any(axis=1, keepdims=True)
    other = 1 - target_state
    p_flip_target = np.where(mcm_trial, mcm.probability(target_state), base.probability(target_state))
    p_flip_target = p_flip_target + photons / constants.collection_efficiency * constants.raman_flip_branch
    p_flip_other = np.where(mcm_trial, mcm.probability(other), base.probability(other))
    p_flip = np.where(bright, p_flip_target, np.where(dark, p_flip_other, 0.0))
    flipped = imaged & ~lost & (u_flip < p_flip)

    out = array.copy()
    final_state = np.where(bright, target_state, other)
    final_state = np.where(flipped, 1 - final_state, final_state)
    out.p1 = np.where(imaged, final_state.astype(float), array.p1)
    out.coherence = np.where(imaged, 0j, array.coherence)

    if hidden.any():
        sign = 1.0 if target_state == 1 else -1.0
        offset = phase_offset * params.duration_ratio
        if offset_reference_mhz is not None:
            offset = offset * offset_reference_mhz / shift
        phase = light_shift_phase(params.saturation, constants.gamma, shift, params.duration_s, offset)
        extra = params.hidden_excess_decoherence
        keep = (1 - p_hidden) * (1 - extra) ** params.duration_ratio
        out.coherence = np.where(hidden, out.coherence * keep * np.exp(1j * sign * phase), out.coherence)

    out.present = present & ~lost
    out.p1 = np.where(out.present, out.p1, 0.0)
    out.coherence = np.where(out.present, out.coherence, 0j)
    frame = ImageFrame(target_state, counts, bright, photons, lost, flipped, hidden, present.copy())
    return out, frame


def classify_frame(frame, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Bright where counts >= threshold (ties count as bright)."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    counts = frame.counts if isinstance(frame, ImageFrame) else np.asarray(frame)
    return counts >= threshold


def overlap_error(threshold: float, camera: CameraModel = CameraModel(),
                  params: ImagingParams = ImagingParams()) -> float:
    """Equal-prior misclassification from the Gaussian approximation of the camera model."""
    from scipy.special import ndtr

    gain = camera.bright_mean / params.mean_collected_photons
    n = params.mean_collected_photons * params.duration_ratio
    mu1 = camera.background_mean + gain * n
    s1 = math.sqrt(gain**2 * n + camera.bright_std_extra**2 + camera.background_std**2)
    s0 = camera.background_std
    return 0.5 * (ndtr(-(threshold - camera.background_mean) / s0) + ndtr(-(mu1 - threshold) / s1))


def imaged_state_loss_per_image(params: ImagingParams, constants: AtomicConstants = AtomicConstants(),
                                dead_time_s: float = DEAD_TIME_S, mcm: bool = False,
                                tones: ToneLedger | None = None) -> float:
    """Closed-form apparent loss per image of an atom repeatedly imaged in its own state:
    loss during the image, vacuum loss over image + dead time, and flips out of the state."""
    ledger = tones if tones is not None else default_tone_ledger(params.target_state, mcm=mcm, constants=constants)
    flips = spin_flip_budget(ledger, params.saturation, params.target_state, constants,
                             duration_s=params.duration_s,
                             n_collected=params.mean_collected_photons * params.duration_ratio,
                             default_duration_s=params.default_duration_s)
    survive = (1 - expected_image_loss(params, constants)) * (1 - vacuum_loss_probability(params.duration_s, constants))
    survive *= 1 - flips.probability(params.target_state)
    survive *= 1 - vacuum_loss_probability(dead_time_s, constants)
    return 1 - float(survive)
