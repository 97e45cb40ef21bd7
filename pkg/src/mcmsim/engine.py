"""Trial engine: runs a sequence over seeded trials in vectorized blocks.

Trial ``i`` draws only from ``SeedSequence([seed, i])``, so results do not
depend on the block size or on how blocks are spread over worker processes.
Per-block statistics are integer counts and float sums merged in block order,
which keeps the aggregate bit-identical between 1-worker and k-worker runs.
"""
from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import Physics
from .imaging import classify_frame, initialize_array, simulate_image, write_frames
from .qubits import (
    PulseSpec,
    apply_pulse,
    apply_vacuum_loss,
    evolve_free,
    optical_pump,
    set_hiding,
)
from .rearrange import execute_moves, plan_refill, refill_window
from .rng import TrialRngs, disorder_normals
from .sequence import (
    ROLE_NAMES,
    Echo,
    Hide,
    Image,
    MotLoad,
    OpticalPump,
    Pulse,
    Readout,
    RefillCycle,
    Wait,
    image_labels,
    validate_sequence,
)

log = logging.getLogger(__name__)

HIST_EDGES = np.arange(-20.0, 100.0 + 0.5, 0.5)
N_ROLES = len(ROLE_NAMES)
_COUNT_FIELDS = ("bright", "present", "cond", "both", "truth_present")
_SUM_FIELDS = ("expected", "expected_truth")
# Born probabilities are summed as fixed-point integers so that totals do not
# depend on how trials were split into blocks
FIXED_POINT = 2**40


@dataclass(frozen=True)
class Experiment:
    """One sequence run over ``n_trials`` trials; trial i uses scan phase
    2*pi*(i mod n_phases)/n_phases."""

    name: str
    steps: tuple
    n_trials: int
    dims: tuple
    roles: tuple
    fill: object  # scalar, or tuple of (role code, probability)
    physics: Physics = Physics()
    n_phases: int = 1
    record_frames: bool = False

    def __post_init__(self):
        validate_sequence(self.steps)
        if self.n_trials < 0:
            raise ValueError("n_trials must be non-negative")
        if self.n_phases < 1:
            raise ValueError("n_phases must be positive")
        if len(self.roles) != self.dims[0] * self.dims[1]:
            raise ValueError("roles must have one entry per site")

    @property
    def n_sites(self) -> int:
        return self.dims[0] * self.dims[1]

    def scan_phases(self) -> np.ndarray:
        return 2 * math.pi * np.arange(self.n_phases) / self.n_phases

    def role_mask(self, *names) -> np.ndarray:
        roles = np.asarray(self.roles)
        return np.isin(roles, [int(ROLE_NAMES[n]) for n in names])


def _empty_stats(exp: Experiment) -> dict:
    P, S = exp.n_phases, exp.n_sites
    out = {}
    for label in image_labels(exp.steps):
        d = {"trials": np.zeros(P, np.int64)}
        d.update({f: np.zeros((P, S), np.int64) for f in _COUNT_FIELDS})
        d.update({f: np.zeros((P, S), np.int64) for f in _SUM_FIELDS})
        d["hist"] = np.zeros((N_ROLES, HIST_EDGES.size - 1), np.int64)
        out[label] = d
    return out


@dataclass
class BlockResult:
    stats: dict
    events: list
    aborted: list
    frames: str = ""


def _record(stats, exp, phase_idx, label, bright, present, cond=None, expected=None, counts=None):
    d = stats[label]
    np.add.at(d["trials"], phase_idx, 1)
    np.add.at(d["bright"], phase_idx, bright.astype(np.int64))
    np.add.at(d["present"], phase_idx, present.astype(np.int64))
    np.add.at(d["truth_present"], phase_idx, present.astype(np.int64))
    if cond is not None:
        np.add.at(d["cond"], phase_idx, cond.astype(np.int64))
        np.add.at(d["both"], phase_idx, (cond & bright).astype(np.int64))
    if expected is not None:
        fixed = np.rint(np.asarray(expected) * FIXED_POINT).astype(np.int64)
        if cond is not None:
            np.add.at(d["expected"], phase_idx, np.where(cond, fixed, 0))
        np.add.at(d["expected_truth"], phase_idx, np.where(present, fixed, 0))
    if counts is not None:
        roles = np.asarray(exp.roles)
        for r in range(N_ROLES):
            d["hist"][r] += np.histogram(counts[:, roles == r], HIST_EDGES)[0]


def _check_finite(arr, step_index):
    if not (np.all(np.isfinite(arr.p1)) and np.all(np.isfinite(arr.coherence))):
        raise FloatingPointError(f"non-finite qubit state after step {step_index}")


def _simulate(exp: Experiment, seed: int, trials: np.ndarray) -> BlockResult:
    ph = exp.physics
    rngs = TrialRngs.for_trials(seed, trials)
    B = len(trials)
    phase_idx = trials % exp.n_phases
    scan = exp.scan_phases()[phase_idx]
    roles = np.asarray(exp.roles, dtype=np.int8)
    fill = dict(exp.fill) if isinstance(exp.fill, tuple) else exp.fill
    arr = initialize_array(exp.dims, fill, roles, rngs, gradient_hz_per_site=ph.gradient_hz_per_site,
                           jitter_hz=ph.jitter_hz)
    if ph.hide_disorder == "static":
        z = disorder_normals(seed, exp.n_sites)
        arr.hide_shift_mhz = np.broadcast_to(ph.hide_mean_mhz * (1 + ph.hide_rel_std * z),
                                             arr.hide_shift_mhz.shape).copy()
    stats = _empty_stats(exp)
    events: list = []
    frames = io.StringIO() if exp.record_frames else None
    frame_rows = []
    bright_by_label: dict[str, np.ndarray] = {}
    latest = None
    dephasing = 0.0 if ph.ideal else ph.echo_dephasing_rate
    depol = 0.0 if ph.ideal else ph.pulse_depolarization
    image_index = 0

    def image(state, label, duration=None, overrides=(), hist=False):
        nonlocal arr, image_index
        params = ph.imaging_params(state, duration, overrides)
        # hidden atoms keep precessing through the image
        arr = evolve_free(arr, params.duration_s, dephasing)
        present = arr.present.copy()
        p_target = arr.p1 if state == 1 else 1.0 - arr.p1
        arr, frame = simulate_image(arr, state, params, ph.camera, ph.constants, rngs,
                                    phase_offset=ph.phase_offset, hidden_scatter=not ph.ideal,
                                    offset_reference_mhz=ph.hide_mean_mhz)
        bright = classify_frame(frame, ph.threshold)
        if frames is not None:
            frame_rows.append((int(trials[0]), image_index, frame))
        image_index += 1
        n_bright = bright.sum(axis=1)
        for b in range(B):
            events.append((int(trials[b]), step_no, "image", f"label={label};bright={int(n_bright[b])}"))
        return bright, present, p_target.copy(), (frame.counts if hist else None)

    for step_no, step in enumerate(exp.steps):
        if isinstance(step, (Pulse, Echo)):
            area = step.area if isinstance(step, Pulse) else math.pi
            axis = step.phase + (scan if isinstance(step, Pulse) and step.scanned else 0.0)
            arr = apply_pulse(arr, PulseSpec(area, axis, ph.rabi_hz, True, depol))
        elif isinstance(step, (Wait, MotLoad)):
            rate = dephasing + (ph.mot_dephasing_rate if isinstance(step, MotLoad) and not ph.ideal else 0.0)
            arr = evolve_free(arr, step.duration, rate)
            arr, _ = apply_vacuum_loss(arr, step.duration, rngs, ph.constants)
        elif isinstance(step, Hide):
            mask = np.broadcast_to(exp.role_mask(*step.roles), arr.present.shape)
            arr = set_hiding(arr, mask, rngs, ph.hide_mean_mhz, ph.hide_rel_std)
        elif isinstance(step, Image):
            bright, present, _, counts = image(step.state, step.label, step.duration, step.overrides,
                                               step.histogram)
            cond = bright_by_label[step.condition] if step.condition else None
            _record(stats, exp, phase_idx, step.label, bright, present, cond, counts=counts)
            bright_by_label[step.label] = bright
            latest = step.label
        elif isinstance(step, OpticalPump):
            arr = optical_pump(arr, exp.role_mask(*step.roles), state=step.state)
        elif isinstance(step, RefillCycle):
            window = step.window if step.window is not None else refill_window(step.n_cycles, ph.total_hold_s)
            if step.enabled:
                occupied = bright_by_label[step.plan_from or latest]
                for b in range(B):
                    plan = plan_refill(arr, ph.timing, window, trial=b, occupied=occupied[b])
                    arr, report = execute_moves(arr, plan, ph.move_loss_prob, rngs.generators[b], trial=b)
                    events.append((int(trials[b]), step_no, "refill",
                                   f"moves={len(plan.moves)};completed={len(report.completed)};"
                                   f"lost={len(report.lost)};stale={len(report.stale)};"
                                   f"collisions={len(report.collisions)};dropped={len(plan.dropped)};"
                                   f"unmatched={len(plan.unmatched)};time={plan.total_time!r}"))
            hold = window + ph.timing.overhead
            arr = evolve_free(arr, hold, dephasing)
            arr, _ = apply_vacuum_loss(arr, hold, rngs, ph.constants)
        elif isinstance(step, Readout):
            bright, present, p_target, counts = image(step.state, step.label, hist=step.histogram)
            arr = optical_pump(arr, np.ones(exp.n_sites, bool))
            final, f_present, _, f_counts = image(1, step.final_label, hist=step.histogram)
            _record(stats, exp, phase_idx, step.final_label, final, f_present, counts=f_counts)
            _record(stats, exp, phase_idx, step.label, bright, present, final if step.postselect else None,
                    expected=p_target, counts=counts)
            bright_by_label[step.label] = bright
            bright_by_label[step.final_label] = final
            latest = step.final_label
        _check_finite(arr, step_no)

    if frames is not None:
        write_frames(frame_rows, frames)
    return BlockResult(stats, events, [], frames.getvalue() if frames is not None else "")


def run_block(exp: Experiment, seed: int, start: int, stop: int) -> BlockResult:
    """Simulate trials [start, stop); a failing block is retried trial by
    trial so one bad trial is logged and dropped without losing the rest."""
    trials = np.arange(start, stop)
    try:
        return _simulate(exp, seed, trials)
    except (FloatingPointError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        if len(trials) == 1:
            log.warning("trial %d aborted: %s", start, exc)
            return BlockResult(_empty_stats(exp), [(start, -1, "abort", str(exc))], [start])
    parts = [run_block(exp, seed, t, t + 1) for t in trials]
    return merge_blocks(exp, parts)


def merge_blocks(exp: Experiment, parts) -> BlockResult:
    stats = _empty_stats(exp)
    events, aborted, frames = [], [], []
    for part in parts:
        for label, d in part.stats.items():
            for k, v in d.items():
                stats[label][k] += v
        events += part.events
        aborted += part.aborted
        if part.frames:
            # keep a single header line
            text = part.frames if not frames else part.frames.split("\n", 1)[1]
            frames.append(text)
    events.sort(key=lambda e: (e[0], e[1]))
    return BlockResult(stats, events, aborted, "".join(frames))


def _run_block_args(args):
    return run_block(*args)


@dataclass
class ExperimentLog:
    name: str
    n_trials: int
    n_phases: int
    roles: np.ndarray
    stats: dict
    events: list = field(default_factory=list)
    aborted: list = field(default_factory=list)
    frames: str = ""

    def scan_phases(self) -> np.ndarray:
        return 2 * math.pi * np.arange(self.n_phases) / self.n_phases

    def _mask(self, roles):
        if roles is None:
            return np.ones(self.roles.size, bool)
        return np.isin(self.roles, [int(ROLE_NAMES[r]) for r in roles])

    def counts(self, label: str, roles=None, conditioned: bool = True, by_phase: bool = False):
        """(successes, shots): bright among conditioned trial-sites, or among
        all trial-sites when ``conditioned`` is False."""
        d = self.stats[label]
        m = self._mask(roles)
        if conditioned:
            k, n = d["both"][:, m].sum(axis=1), d["cond"][:, m].sum(axis=1)
        else:
            k, n = d["bright"][:, m].sum(axis=1), (d["trials"][:, None] * np.ones(m.sum(), np.int64)).sum(axis=1)
        return (k, n) if by_phase else (int(k.sum()), int(n.sum()))

    def fringe(self, label: str, roles=None, expected: bool = False):
        """Per-phase (bright fraction, shots) over post-selected trial-sites;
        ``expected`` uses Born probabilities of truly present atoms instead."""
        d = self.stats[label]
        m = self._mask(roles)
        if expected:
            n = d["truth_present"][:, m].sum(axis=1)
            s = d["expected_truth"][:, m].sum(axis=1) / FIXED_POINT
        else:
            n = d["cond"][:, m].sum(axis=1)
            s = d["both"][:, m].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return s / n, n

    def site_data(self, label: str):
        d = self.stats[label]
        return d["both"].T, d["cond"].T

    def histogram(self, label: str, roles=None):
        m = [int(ROLE_NAMES[r]) for r in (roles or ROLE_NAMES)]
        return self.stats[label]["hist"][m].sum(axis=0), HIST_EDGES


def run_experiment(exp: Experiment, seed: int, workers: int = 1, block_size: int = 128) -> ExperimentLog:
    if block_size < 1:
        raise ValueError("block_size must be positive")
    bounds = [(s, min(s + block_size, exp.n_trials)) for s in range(0, exp.n_trials, block_size)]
    args = [(exp, seed, a, b) for a, b in bounds]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block_args, args))
    else:
        parts = [_run_block_args(a) for a in args]
    merged = merge_blocks(exp, parts)
    return ExperimentLog(exp.name, exp.n_trials, exp.n_phases, np.asarray(exp.roles), merged.stats,
                         merged.events, merged.aborted, merged.frames)
