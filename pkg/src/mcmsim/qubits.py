"""Tweezer-array state and the deterministic qubit channels.

Each atom is a 2x2 density matrix stored as (p1, coherence) with
``coherence = <1|rho|0>``. All arrays carry a leading trial axis so a block of
independent trials evolves in one vectorized pass; a single trial is a block of
one. Functions never mutate their input.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import yaml

from .atomic import (
    DEFAULT_HIDE_SHIFT_MHZ,
    DEFAULT_HIDE_SHIFT_REL_STD,
    AtomicConstants,
    vacuum_loss_probability,
)
from .rng import as_trial_rngs

TWO_PI = 2.0 * math.pi
POSITIVITY_TOL = 1e-12

# White dephasing giving 1/e echo contrast at 3.3 s.
ECHO_DEPHASING_RATE = 1.0 / 3.3
# Linear field gradient plus per-trial site jitter; together they put the
# ensemble Ramsey contrast of a 10-column array at 1/e after 430 ms.
GRADIENT_HZ_PER_SITE = 0.14729
DETUNING_JITTER_HZ = 0.25
# Bloch-vector shrink per pi/2 of Raman pulse area (intermediate-state scattering);
# sets the base Ramsey contrast to 98.5% for a 10 ms hold.
PULSE_DEPOLARIZATION = 0.0058
DEFAULT_RABI_HZ = 1.4e3
MOT_DEPHASING_RATE = 0.03


class Role(enum.IntEnum):
    DATA = 0
    ANCILLA = 1
    RESERVOIR = 2


@dataclass(frozen=True)
class QubitState:
    present: bool
    p1: float = 0.0
    coherence: complex = 0j

    def is_valid(self, tol: float = POSITIVITY_TOL) -> bool:
        if not self.present:
            return self.p1 == 0 and self.coherence == 0
        return 0 <= self.p1 <= 1 and abs(self.coherence) <= math.sqrt(self.p1 * (1 - self.p1)) + tol

    def density_matrix(self) -> np.ndarray:
        """rho in the (|0>, |1>) basis."""
        c = self.coherence
        return np.array([[1 - self.p1, np.conj(c)], [c, self.p1]], dtype=complex)

    @classmethod
    def from_density_matrix(cls, rho) -> QubitState:
        rho = np.asarray(rho)
        return cls(True, float(rho[1, 1].real), complex(rho[1, 0]))


@dataclass(frozen=True)
class PulseSpec:
    area: float
    axis_phase: float | np.ndarray = 0.0
    rabi_frequency_hz: float = DEFAULT_RABI_HZ
    global_pulse: bool = True
    depolarization: float = PULSE_DEPOLARIZATION

    def __post_init__(self):
        if self.area < 0:
            raise ValueError("pulse area must be non-negative")
        if not self.global_pulse:
            raise ValueError("site-selective pulses are not supported")


@dataclass
class ArrayState:
    dims: tuple[int, int]
    roles: np.ndarray  # (sites,) Role codes
    present: np.ndarray  # (trials, sites) bool
    p1: np.ndarray
    coherence: np.ndarray
    hiding_mask: np.ndarray
    hide_shift_mhz: np.ndarray  # nan until sampled
    detuning_hz: np.ndarray

    @property
    def n_trials(self) -> int:
        return self.present.shape[0]

    @property
    def n_sites(self) -> int:
        return self.present.shape[1]

    def copy(self) -> ArrayState:
        return ArrayState(
            self.dims, self.roles, self.present.copy(), self.p1.copy(), self.coherence.copy(),
            self.hiding_mask.copy(), self.hide_shift_mhz.copy(), self.detuning_hz.copy(),
        )

    def site(self, row: int, col: int) -> int:
        return row * self.dims[1] + col

    def coords(self, site: int) -> tuple[int, int]:
        return divmod(site, self.dims[1])

    def role_mask(self, *roles: Role) -> np.ndarray:
        return np.isin(self.roles, [int(r) for r in roles])

    def qubit(self, site: int, trial: int = 0) -> QubitState:
        if not self.present[trial, site]:
            return QubitState(False)
        return QubitState(True, float(self.p1[trial, site]), complex(self.coherence[trial, site]))

    def bloch(self):
        return 2 * self.coherence.real, 2 * self.coherence.imag, 1 - 2 * self.p1

    def positivity_violations(self, tol: float = POSITIVITY_TOL) -> int:
        bad = (self.p1 < -tol) | (self.p1 > 1 + tol)
        bad |= np.abs(self.coherence) > np.sqrt(np.clip(self.p1 * (1 - self.p1), 0, None)) + tol
        bad |= ~self.present & ((self.p1 != 0) | (self.coherence != 0))
        return int(bad.sum())

    def snapshot(self, trial: int = 0) -> str:
        """Structured-text dump of one trial, for debugging."""
        sites = []
        for s in range(self.n_sites):
            r, c = self.coords(s)
            entry = {"row": r, "col": c, "role": Role(self.roles[s]).name.lower(),
                     "present": bool(self.present[trial, s])}
            if entry["present"]:
                entry["p1"] = float(self.p1[trial, s])
                entry["coherence"] = [float(self.coherence[trial, s].real), float(self.coherence[trial, s].imag)]
            if self.hiding_mask[trial, s]:
                entry["hide_shift_mhz"] = float(self.hide_shift_mhz[trial, s])
            entry["detuning_hz"] = float(self.detuning_hz[trial, s])
            sites.append(entry)
        return yaml.safe_dump({"dims": list(self.dims), "sites": sites}, sort_keys=False)


def make_roles(dims, layout: str = "checkerboard", sub_origin=(2, 3), sub_dims=(3, 4)) -> np.ndarray:
    """Role map: ``checkerboard`` (data on even parity) or ``subarray``
    (checkerboard inside ``sub_dims`` at ``sub_origin``, reservoir elsewhere)."""
    rows, cols = dims
    r, c = np.divmod(np.arange(rows * cols), cols)
    checker = np.where((r + c) % 2 == 0, Role.DATA, Role.ANCILLA)
    if layout == "checkerboard":
        return checker.astype(np.int8)
    if layout == "subarray":
        r0, c0 = sub_origin
        inside = (r >= r0) & (r < r0 + sub_dims[0]) & (c >= c0) & (c < c0 + sub_dims[1])
        return np.where(inside, checker, Role.RESERVOIR).astype(np.int8)
    if layout == "uniform":
        return np.full(rows * cols, Role.DATA, dtype=np.int8)
    raise ValueError(f"unknown layout {layout!r}")


def empty_array(dims, roles=None, n_trials: int = 1) -> ArrayState:
    n = dims[0] * dims[1]
    roles = make_roles(dims) if roles is None else np.asarray(roles, dtype=np.int8)
    if roles.shape != (n,):
        raise ValueError("roles must have one entry per site")
    shape = (n_trials, n)
    return ArrayState(
        tuple(dims), roles, np.zeros(shape, bool), np.zeros(shape), np.zeros(shape, complex),
        np.zeros(shape, bool), np.full(shape, np.nan), np.zeros(shape),
    )


def sample_detunings(dims, rng, n_trials: int, gradient_hz_per_site: float, jitter_hz: float) -> np.ndarray:
    """Linear gradient along columns (centred on the array) plus per-site Gaussian jitter."""
    rows, cols = dims
    col = np.arange(rows * cols) % cols
    base = gradient_hz_per_site * (col - (cols - 1) / 2)
    rngs = as_trial_rngs(rng, n_trials)
    return base + jitter_hz * rngs.normal(rows * cols)


# ---------------------------------------------------------------- channels

def _from_bloch(state: ArrayState, x, y, z) -> ArrayState:
    out = state.copy()
    out.p1 = np.where(state.present, (1 - z) / 2, 0.0)
    out.coherence = np.where(state.present, (x + 1j * y) / 2, 0j)
    return out


def pulse_propagator(area: float, axis_phase: float, detuning_hz: float = 0.0,
                     rabi_frequency_hz: float = DEFAULT_RABI_HZ) -> np.ndarray:
    """Exact 2x2 propagator for H = (W/2)(cos p X + sin p Y) + (d/2) Z over t = area/W."""
    omega = TWO_PI * rabi_frequency_hz
    delta = TWO_PI * detuning_hz
    t = area / omega
    gen = np.hypot(omega, delta)
    n = np.array([omega * math.cos(axis_phase), omega * math.sin(axis_phase), delta]) / gen
    X = np.array([[0, 1], [1, 0]], complex)
    Y = np.array([[0, -1j], [1j, 0]], complex)
    Z = np.array([[1, 0], [0, -1]], complex)
    a = gen * t / 2
    return math.cos(a) * np.eye(2) - 1j * math.sin(a) * (n[0] * X + n[1] * Y + n[2] * Z)


def apply_pulse(array: ArrayState, pulse: PulseSpec) -> ArrayState:
    """Global detuned Raman rotation, followed by the pulse-scattering shrink.

    ``pulse.axis_phase`` may be a scalar or a per-trial array.
    """
    omega = TWO_PI * pulse.rabi_frequency_hz
    delta = TWO_PI * array.detuning_hz
    phi = np.asarray(pulse.axis_phase, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    t = pulse.area / omega
    gen = np.sqrt(omega**2 + delta**2)
    nx, ny, nz = omega * np.cos(phi) / gen, omega * np.sin(phi) / gen, delta / gen
    theta = gen * t
    x, y, z = array.bloch()
    cos, sin = np.cos(theta), np.sin(theta)
    dot = nx * x + ny * y + nz * z
    cx, cy, cz = ny * z - nz * y, nz * x - nx * z, nx * y - ny * x
    x2 = x * cos + cx * sin + nx * dot * (1 - cos)
    y2 = y * cos + cy * sin + ny * dot * (1 - cos)
    z2 = z * cos + cz * sin + nz * dot * (1 - cos)
    if pulse.depolarization:
        shrink = (1.0 - pulse.depolarization) ** (pulse.area / (math.pi / 2))
        x2, y2, z2 = x2 * shrink, y2 * shrink, z2 * shrink
    return _from_bloch(array, x2, y2, z2)


def apply_phase_imprint(array: ArrayState, phase) -> ArrayState:
    """coherence *= exp(i*phase); ``phase`` broadcasts against (trials, sites)."""
    phase = np.asarray(phase, dtype=float)
    if not np.all(np.isfinite(phase)):
        raise ValueError("phases must be finite")
    out = array.copy()
    out.coherence = array.coherence * np.exp(1j * phase)
    return out


def apply_dephasing(array: ArrayState, rate: float, duration: float, sites=None) -> ArrayState:
    """Pure dephasing: coherence *= exp(-rate*duration) on ``sites`` (default all)."""
    if rate < 0:
        raise ValueError("dephasing rate must be non-negative")
    out = array.copy()
    factor = math.exp(-rate * duration)
    if sites is None:
        out.coherence = array.coherence * factor
    else:
        out.coherence = np.where(sites, array.coherence * factor, array.coherence)
    return out


def apply_coherence_factor(array: ArrayState, factor) -> ArrayState:
    out = array.copy()
    out.coherence = array.coherence * factor
    return out


def evolve_free(array: ArrayState, duration: float, dephasing_rate: float = ECHO_DEPHASING_RATE) -> ArrayState:
    """Hold: per-site precession at ``detuning_hz`` plus white dephasing."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    out = array.copy()
    out.coherence = array.coherence * np.exp((1j * TWO_PI * array.detuning_hz - dephasing_rate) * duration)
    return out


def apply_vacuum_loss(array: ArrayState, duration: float, rng, constants: AtomicConstants = AtomicConstants()):
    """Background-gas loss; returns (state, lost mask)."""
    rngs = as_trial_rngs(rng, array.n_trials)
    u = rngs.random(array.n_sites)
    lost = array.present & (u < vacuum_loss_probability(duration, constants))
    return remove_atoms(array, lost), lost


def remove_atoms(array: ArrayState, mask) -> ArrayState:
    out = array.copy()
    out.present = array.present & ~mask
    out.p1 = np.where(out.present, array.p1, 0.0)
    out.coherence = np.where(out.present, array.coherence, 0j)
    return out


def optical_pump(array: ArrayState, sites, failure_prob: float = 0.0, rng=None, state: int = 1) -> ArrayState:
    """Reset selected, present, non-hidden atoms to ``state`` (default |1>)."""
    if state not in (0, 1):
        raise ValueError("state must be 0 or 1")
    sites = np.broadcast_to(np.asarray(sites, bool), array.present.shape)
    target = sites & array.present & ~array.hiding_mask
    if failure_prob > 0:
        if rng is None:
            raise ValueError("an rng is needed when failure_prob > 0")
        u = as_trial_rngs(rng, array.n_trials).random(array.n_sites)
        target &= u >= failure_prob
    out = array.copy()
    out.p1 = np.where(target, float(state), array.p1)
    out.coherence = np.where(target, 0j, array.coherence)
    return out


def set_hiding(array: ArrayState, mask, rng=None, mean_shift_mhz: float = DEFAULT_HIDE_SHIFT_MHZ,
               rel_std: float = DEFAULT_HIDE_SHIFT_REL_STD) -> ArrayState:
    """Switch hiding light onto ``mask``.

    Shifts are drawn the first time a site is hidden in a trial and then kept,
    so repeated images within a trial see the same per-site shift.
    """
    mask = np.broadcast_to(np.asarray(mask, bool), array.present.shape)
    out = array.copy()
    out.hiding_mask = mask.copy()
    need = mask & np.isnan(array.hide_shift_mhz)
    if need.any():
        if rng is None:
            raise ValueError("an rng is needed to sample hiding shifts")
        draw = as_trial_rngs(rng, array.n_trials).normal_where(array.n_sites, need.any(axis=1))
        shifts = mean_shift_mhz * (1 + rel_std * draw)
        out.hide_shift_mhz = np.where(need, shifts, array.hide_shift_mhz)
    return out


def prepare_state(array: ArrayState, p1, coherence=0j) -> ArrayState:
    """Set every present atom to the given populations/coherence."""
    out = array.copy()
    out.p1 = np.where(array.present, p1, 0.0)
    out.coherence = np.where(array.present, coherence, 0j)
    return out
