"""Declarative experiment sequences.

A sequence is a flat tuple of steps. ``parse_sequence`` builds one from the
list-of-mappings form used in config files, expanding ``repeat`` blocks, and
``validate_sequence`` checks that every Image states the hiding it expects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .qubits import Role

ROLE_NAMES = {"data": Role.DATA, "ancilla": Role.ANCILLA, "reservoir": Role.RESERVOIR}
ALL_ROLES = ("data", "ancilla", "reservoir")


class SequenceError(ValueError):
    pass


def _roles(value, where: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        value = [value]
    out = []
    for r in value:
        if r not in ROLE_NAMES:
            raise SequenceError(f"{where}: unknown role {r!r}")
        out.append(r)
    return tuple(sorted(set(out), key=ALL_ROLES.index))


@dataclass(frozen=True)
class Pulse:
    area: float = math.pi / 2
    phase: float = 0.0
    scanned: bool = False  # add the trial's scan phase to the axis


@dataclass(frozen=True)
class Wait:
    duration: float


@dataclass(frozen=True)
class MotLoad:
    """A hold during which the MOT runs next to the array."""

    duration: float


@dataclass(frozen=True)
class Hide:
    roles: tuple[str, ...] = ()  # empty switches hiding off


@dataclass(frozen=True)
class Image:
    state: int
    label: str
    hidden: tuple[str, ...] = ()
    duration: float | None = None
    overrides: tuple = ()  # (name, value) pairs applied to ImagingParams
    condition: str | None = None  # label of an earlier image to condition on
    histogram: bool = False


@dataclass(frozen=True)
class OpticalPump:
    roles: tuple[str, ...] = ALL_ROLES
    state: int = 1


@dataclass(frozen=True)
class RefillCycle:
    """Refill empty ancillae from the reservoir, then hold for the window.

    The window defaults to the value that keeps ``n_cycles`` cycles near the
    nominal total hold.
    """

    n_cycles: int
    window: float | None = None
    plan_from: str | None = None  # image label; defaults to the latest image
    enabled: bool = True


@dataclass(frozen=True)
class Echo:
    phase: float = 0.0


@dataclass(frozen=True)
class Readout:
    """Image ``state``, optically pump everything to |1>, then take a final
    occupancy image; with ``postselect`` the readout statistics are
    conditioned on the final image."""

    state: int = 1
    label: str = "readout"
    postselect: bool = True
    histogram: bool = False

    @property
    def final_label(self) -> str:
        return f"{self.label}_final"


Step = Pulse | Wait | MotLoad | Hide | Image | OpticalPump | RefillCycle | Echo | Readout


def image_labels(steps) -> list[str]:
    out = []
    for s in steps:
        if isinstance(s, Image):
            out.append(s.label)
        elif isinstance(s, Readout):
            out += [s.label, s.final_label]
    return out


def validate_sequence(steps) -> None:
    hidden: tuple[str, ...] = ()
    seen: set[str] = set()
    for i, s in enumerate(steps):
        where = f"sequence[{i}]"
        if isinstance(s, Hide):
            hidden = s.roles
        elif isinstance(s, Image):
            if s.state not in (0, 1):
                raise SequenceError(f"{where}: image state must be 0 or 1")
            if s.hidden != hidden:
                raise SequenceError(f"{where}: image {s.label!r} expects hidden={list(s.hidden)} "
                                    f"but hiding is {list(hidden)}")
            if s.condition is not None and s.condition not in seen:
                raise SequenceError(f"{where}: condition {s.condition!r} is not an earlier image")
            if s.duration is not None and s.duration <= 0:
                raise SequenceError(f"{where}: duration must be positive")
            if s.label in seen:
                raise SequenceError(f"{where}: duplicate image label {s.label!r}")
            seen.add(s.label)
        elif isinstance(s, Readout):
            if hidden:
                raise SequenceError(f"{where}: readout with hiding on")
            for lab in (s.label, s.final_label):
                if lab in seen:
                    raise SequenceError(f"{where}: duplicate image label {lab!r}")
                seen.add(lab)
        elif isinstance(s, (Wait, MotLoad)):
            if not s.duration >= 0:
                raise SequenceError(f"{where}: duration must be non-negative")
        elif isinstance(s, Pulse):
            if s.area < 0:
                raise SequenceError(f"{where}: pulse area must be non-negative")
        elif isinstance(s, RefillCycle):
            if s.plan_from is not None and s.plan_from not in seen:
                raise SequenceError(f"{where}: plan_from {s.plan_from!r} is not an earlier image")
            if not seen:
                raise SequenceError(f"{where}: refill needs an earlier image")
            if s.window is not None and s.window < 0:
                raise SequenceError(f"{where}: window must be non-negative")
        elif isinstance(s, OpticalPump):
            if s.state not in (0, 1):
                raise SequenceError(f"{where}: pump state must be 0 or 1")
        elif not isinstance(s, Echo):
            raise SequenceError(f"{where}: unknown step {s!r}")


# ---------------------------------------------------------------- config form

def _parse_one(kind: str, arg, where: str):
    arg = {} if arg is None else arg
    if kind in ("wait", "mot_load"):
        duration = arg["duration"] if isinstance(arg, dict) else arg
        return (Wait if kind == "wait" else MotLoad)(float(duration))
    if not isinstance(arg, dict):
        raise SequenceError(f"{where}: expected a mapping for {kind!r}")
    allowed = {
        "pulse": {"area", "phase", "scanned"},
        "hide": {"roles"},
        "unhide": set(),
        "image": {"state", "label", "hidden", "duration", "overrides", "condition", "histogram"},
        "optical_pump": {"roles", "state"},
        "refill": {"n_cycles", "window", "plan_from", "enabled"},
        "echo": {"phase"},
        "readout": {"state", "label", "postselect", "histogram"},
    }
    if kind not in allowed:
        raise SequenceError(f"{where}: unknown step kind {kind!r}")
    extra = set(arg) - allowed[kind]
    if extra:
        raise SequenceError(f"{where}.{sorted(extra)[0]}: unknown key")
    if kind == "pulse":
        return Pulse(float(arg.get("area", math.pi / 2)), float(arg.get("phase", 0.0)), bool(arg.get("scanned", False)))
    if kind == "hide":
        return Hide(_roles(arg.get("roles", ["data"]), where))
    if kind == "unhide":
        return Hide(())
    if kind == "image":
        if "label" not in arg:
            raise SequenceError(f"{where}.label: required")
        return Image(int(arg.get("state", 1)), str(arg["label"]), _roles(arg.get("hidden"), where),
                     None if arg.get("duration") is None else float(arg["duration"]),
                     tuple(sorted(dict(arg.get("overrides", {})).items())), arg.get("condition"),
                     bool(arg.get("histogram", False)))
    if kind == "optical_pump":
        return OpticalPump(_roles(arg.get("roles", list(ALL_ROLES)), where), int(arg.get("state", 1)))
    if kind == "refill":
        return RefillCycle(int(arg.get("n_cycles", 1)),
                           None if arg.get("window") is None else float(arg["window"]),
                           arg.get("plan_from"), bool(arg.get("enabled", True)))
    if kind == "echo":
        return Echo(float(arg.get("phase", 0.0)))
    return Readout(int(arg.get("state", 1)), str(arg.get("label", "readout")), bool(arg.get("postselect", True)),
                   bool(arg.get("histogram", False)))


def parse_sequence(items, where: str = "sequence") -> tuple:
    """Build steps from ``[{kind: args}, ...]``; ``{repeat: {times, steps}}``
    expands inline, with ``{k}`` in image labels replaced by the 1-based
    repetition index."""
    if not isinstance(items, list):
        raise SequenceError(f"{where}: expected a list of steps")
    out = []
    for i, item in enumerate(items):
        w = f"{where}[{i}]"
        if not isinstance(item, dict) or len(item) != 1:
            raise SequenceError(f"{w}: each step is a single-key mapping")
        (kind, arg), = item.items()
        if kind == "repeat":
            if not isinstance(arg, dict) or set(arg) - {"times", "steps"}:
                raise SequenceError(f"{w}: repeat takes 'times' and 'steps'")
            body = arg.get("steps", [])
            for k in range(1, int(arg.get("times", 1)) + 1):
                for step in parse_sequence(body, f"{w}.steps"):
                    out.append(_relabel(step, k))
        else:
            out.append(_parse_one(kind, arg, w))
    return tuple(out)


def _relabel(step, k: int):
    if isinstance(step, (Image, Readout)):
        step = replace(step, label=step.label.replace("{k}", str(k)))
    if isinstance(step, Image) and step.condition:
        step = replace(step, condition=step.condition.replace("{k}", str(k)))
    if isinstance(step, RefillCycle) and step.plan_from:
        step = replace(step, plan_from=step.plan_from.replace("{k}", str(k)))
    return step


def ramsey(middle, readout: Readout = Readout()) -> tuple:
    """pi/2, ``middle``, scanned pi/2 about the opposite axis, readout.

    With the second axis at pi + scan the bright fraction of |1> is
    1/2 + 1/2 cos(scan - accumulated phase).
    """
    return (Pulse(math.pi / 2), *middle, Pulse(math.pi / 2, math.pi, scanned=True), readout)


__all__ = [
    "ALL_ROLES", "Echo", "Hide", "Image", "MotLoad", "OpticalPump", "Pulse", "Readout", "RefillCycle",
    "ROLE_NAMES", "SequenceError", "Step", "Wait", "image_labels", "parse_sequence", "ramsey",
    "validate_sequence",
]
