"""Conditional refilling of empty ancilla sites from the reservoir.

A single movable tweezer carries one atom at a time, so moves are sequential
and the plan's duration is the sum of per-move times. Planning works on one
trial of a batched ArrayState; the runner loops over trials.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qubits import ArrayState, Role
from .rng import as_trial_rngs

DEFAULT_MOVE_LOSS = 0.01


@dataclass(frozen=True)
class MoveTimingModel:
    handoff_time: float = 1e-3  # per pickup and per drop
    transit_time_per_site: float = 1e-3
    overhead: float = 0.0  # camera readout + buffer, charged once per cycle by the runner

    def __post_init__(self):
        if min(self.handoff_time, self.transit_time_per_site, self.overhead) < 0:
            raise ValueError("timing parameters must be non-negative")

    def move_time(self, distance: int) -> float:
        return 2 * self.handoff_time + distance * self.transit_time_per_site


@dataclass
class MovePlan:
    moves: list[tuple[int, int]] = field(default_factory=list)
    distances: list[int] = field(default_factory=list)
    total_time: float = 0.0
    dropped: list[tuple[int, int]] = field(default_factory=list)  # matched but over budget
    unmatched: list[int] = field(default_factory=list)  # empty ancillae with no reservoir atom left

    @property
    def reservoir_exhausted(self) -> bool:
        return bool(self.unmatched)

    def to_dict(self) -> dict:
        return {
            "moves": [list(m) for m in self.moves],
            "distances": list(self.distances),
            "total_time": self.total_time,
            "dropped": [list(m) for m in self.dropped],
            "unmatched": list(self.unmatched),
        }


@dataclass
class MoveReport:
    completed: list[tuple[int, int]] = field(default_factory=list)
    lost: list[tuple[int, int]] = field(default_factory=list)
    stale: list[tuple[int, int]] = field(default_factory=list)
    collisions: list[tuple[int, int]] = field(default_factory=list)

    @property
    def atoms_lost(self) -> int:
        return len(self.lost) + 2 * len(self.collisions)


def _manhattan(dims, a: int, b: int) -> int:
    ra, ca = divmod(a, dims[1])
    rb, cb = divmod(b, dims[1])
    return abs(ra - rb) + abs(ca - cb)


def plan_refill(array: ArrayState, timing: MoveTimingModel = MoveTimingModel(), budget: float = 30e-3,
                trial: int = 0, occupied: np.ndarray | None = None) -> MovePlan:
    """Greedy nearest-reservoir assignment for every empty ancilla site.

    Empty ancillae are served in row-major order; each takes the closest
    still-unused occupied reservoir site (ties broken by row-major reservoir
    order). ``occupied`` overrides the true occupancy of this trial, e.g. with
    what the camera reported.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    occ = array.present[trial] if occupied is None else np.asarray(occupied, bool)
    if occ.shape != (array.n_sites,):
        raise ValueError("occupancy must have one entry per site")
    ancilla = np.flatnonzero((array.roles == Role.ANCILLA) & ~occ)
    reservoir = list(np.flatnonzero((array.roles == Role.RESERVOIR) & occ))

    plan = MovePlan()
    remaining = budget
    for target in ancilla:
        if not reservoir:
            plan.unmatched.append(int(target))
            continue
        dist = [_manhattan(array.dims, target, r) for r in reservoir]
        k = int(np.argmin(dist))  # first minimum is the row-major tie-break
        source = int(reservoir.pop(k))
        cost = timing.move_time(dist[k])
        if plan.dropped or cost > remaining + 1e-12:
            plan.dropped.append((source, int(target)))
            continue
        plan.moves.append((source, int(target)))
        plan.distances.append(int(dist[k]))
        remaining -= cost
        plan.total_time += cost
    return plan


def execute_moves(array: ArrayState, plan: MovePlan, move_loss_prob: float = DEFAULT_MOVE_LOSS,
                  rng=None, trial: int = 0) -> tuple[ArrayState, MoveReport]:
    """Carry out ``plan`` on one trial.

    One uniform is drawn from the trial's stream per planned move, whether or
    not the move turns out stale, so the stream position depends only on the
    plan. Delivered atoms are left in |1>. A move onto a site that is in fact
    occupied loses both atoms (light-assisted collision).
    """
    if not 0 <= move_loss_prob <= 1:
        raise ValueError("move_loss_prob must be in [0, 1]")
    report = MoveReport()
    if not plan.moves:
        return array, report
    if move_loss_prob > 0 and rng is None:
        raise ValueError("an rng is needed when move_loss_prob > 0")
    if move_loss_prob > 0:
        gens = as_trial_rngs(rng).generators
        u = (gens[trial] if len(gens) > 1 else gens[0]).random(len(plan.moves))
    else:
        u = np.ones(len(plan.moves))
    out = array.copy()
    t = trial
    for (source, target), ui in zip(plan.moves, u):
        if not out.present[t, source]:
            report.stale.append((source, target))
            continue
        out.present[t, source] = False
        out.p1[t, source] = 0.0
        out.coherence[t, source] = 0j
        if out.present[t, target]:
            out.present[t, target] = False
            out.p1[t, target] = 0.0
            out.coherence[t, target] = 0j
            report.collisions.append((source, target))
            continue
        if ui < move_loss_prob:
            report.lost.append((source, target))
            continue
        out.present[t, target] = True
        out.p1[t, target] = 1.0
        out.coherence[t, target] = 0j
        report.completed.append((source, target))
    return out, report


def refill_window(n_cycles: int, total_hold: float = 0.6, image_time: float = 5e-3,
                  lo: float = 10e-3, hi: float = 30e-3) -> float:
    """Per-cycle refill window that keeps N cycles near ``total_hold``."""
    if n_cycles <= 0:
        return hi
    return float(np.clip(total_hold / n_cycles - image_time, lo, hi))
