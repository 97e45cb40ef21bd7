import math
from dataclasses import replace

import numpy as np
import pytest

from mcmsim import engine
from mcmsim.config import Physics
from mcmsim.engine import Experiment, run_experiment
from mcmsim.qubits import make_roles
from mcmsim.sequence import (
    Echo,
    Hide,
    Image,
    MotLoad,
    OpticalPump,
    Readout,
    RefillCycle,
    Wait,
    ramsey,
)

ROLES = tuple(int(r) for r in make_roles((2, 3)))
CLEAN = Physics(gradient_hz_per_site=0.0, jitter_hz=0.0).with_ideal()


def exp(steps, n=24, physics=Physics(), n_phases=12, fill=1.0, dims=(2, 3), roles=ROLES, name="t"):
    return Experiment(name, tuple(steps), n, dims, roles, fill, physics, n_phases)


def equal_stats(a, b):
    return a.keys() == b.keys() and all(
        np.array_equal(a[k][f], b[k][f]) for k in a for f in a[k])


def test_experiment_validation():
    with pytest.raises(ValueError):
        exp([Hide(("data",)), Image(1, "x")])
    with pytest.raises(ValueError):
        exp([Readout()], n=-1)
    with pytest.raises(ValueError):
        exp([Readout()], n_phases=0)
    with pytest.raises(ValueError):
        exp([Readout()], roles=(0, 1))


def test_zero_trials_gives_empty_statistics():
    lg = run_experiment(exp([Readout()], n=0), seed=1)
    assert lg.n_trials == 0 and lg.events == [] and lg.aborted == []
    assert all(int(v.sum()) == 0 for d in lg.stats.values() for v in d.values())
    with pytest.raises(ValueError):
        run_experiment(exp([Readout()]), 1, block_size=0)


def test_ideal_ramsey_expected_fringe_is_exact():
    lg = run_experiment(exp(ramsey(()), n=120, physics=CLEAN), seed=4)
    frac, n = lg.fringe("readout", expected=True)
    assert np.all(n > 0)
    assert frac == pytest.approx(0.5 + 0.5 * np.cos(lg.scan_phases()), abs=1e-9)


def test_ideal_echo_removes_gradient():
    # short pulses, so detuning acts only during the holds
    ph = Physics(gradient_hz_per_site=20.0, jitter_hz=5.0, rabi_hz=1e9).with_ideal()
    lg = run_experiment(exp(ramsey((Wait(0.05), Echo(), Wait(0.05))), n=120, physics=ph), seed=4)
    frac, _ = lg.fringe("readout", expected=True)
    # the echo pi pulse inverts the fringe
    assert frac == pytest.approx(0.5 - 0.5 * np.cos(lg.scan_phases()), abs=1e-9)


def test_mot_load_adds_dephasing():
    ph = Physics(gradient_hz_per_site=0.0, jitter_hz=0.0, pulse_depolarization=0.0, echo_dephasing_rate=0.0,
                 mot_dephasing_rate=0.5)
    wait = run_experiment(exp(ramsey((Wait(1.0),)), n=120, physics=ph), seed=2)
    mot = run_experiment(exp(ramsey((MotLoad(1.0),)), n=120, physics=ph), seed=2)
    fw, _ = wait.fringe("readout", expected=True)
    fm, _ = mot.fringe("readout", expected=True)
    # contrast (max - min over the scan) falls by exp(-0.5 * 1 s) under common random numbers
    ratio = (fm.max() - fm.min()) / (fw.max() - fw.min())
    assert ratio == pytest.approx(math.exp(-0.5), rel=0.02)


def test_postselection_conditions_on_final_image():
    lg = run_experiment(exp(ramsey((Wait(0.01),)), n=60, fill=0.5), seed=3)
    d, f = lg.stats["readout"], lg.stats["readout_final"]
    assert np.array_equal(d["cond"], f["bright"])
    assert np.all(d["both"] <= d["cond"]) and np.all(d["both"] <= d["bright"])
    k, n = lg.counts("readout")
    assert n == int(f["bright"].sum())


def test_conditioned_image_counts():
    steps = [OpticalPump(state=1), Image(1, "a"), Image(1, "b", condition="a")]
    lg = run_experiment(exp(steps, n=40, n_phases=1), seed=5)
    assert np.array_equal(lg.stats["b"]["cond"], lg.stats["a"]["bright"])


@pytest.mark.parametrize("block,workers", [(1, 1), (7, 1), (1000, 1), (5, 3)])
def test_block_and_worker_invariance(block, workers):
    steps = ramsey((Wait(2e-3), Hide(("data",)), Image(1, "m", hidden=("data",), histogram=True), Hide(()),
                    Wait(2e-3)), Readout(histogram=True))
    e = exp(steps, n=30, fill=0.7)
    ref = run_experiment(e, seed=11, block_size=30)
    other = run_experiment(e, seed=11, workers=workers, block_size=block)
    assert equal_stats(ref.stats, other.stats)
    assert ref.events == other.events


def test_seed_changes_results():
    e = exp(ramsey((Wait(0.01),)), n=30, fill=0.5)
    a = run_experiment(e, seed=1)
    b = run_experiment(e, seed=2)
    assert not equal_stats(a.stats, b.stats)


def test_failing_trial_is_aborted_and_logged(monkeypatch):
    real = engine._simulate

    def flaky(exp_, seed, trials):
        if 5 in trials:
            raise FloatingPointError("boom")
        return real(exp_, seed, trials)

    monkeypatch.setattr(engine, "_simulate", flaky)
    e = exp(ramsey(()), n=12, n_phases=1)
    lg = run_experiment(e, seed=0, block_size=4)
    assert lg.aborted == [5]
    assert int(lg.stats["readout"]["trials"].sum()) == 11
    assert (5, -1, "abort", "boom") in lg.events


def test_refill_events_and_frames():
    roles = tuple(int(r) for r in make_roles((7, 10), "subarray"))
    steps = [OpticalPump(), Image(1, "m"), RefillCycle(2, window=0.03)]
    e = Experiment("r", tuple(steps), 6, (7, 10), roles, ((0, 1.0), (1, 0.5), (2, 0.8)), Physics(), 1, True)
    lg = run_experiment(e, seed=1)
    refills = [ev for ev in lg.events if ev[2] == "refill"]
    assert len(refills) == 6 and all("moves=" in ev[3] for ev in refills)
    lines = lg.frames.splitlines()
    assert lines[0].startswith("trial,image,site") and len(lines) == 1 + 6 * 70


def test_refill_fills_empty_ancillae():
    roles = tuple(int(r) for r in make_roles((7, 10), "subarray"))
    ph = replace(Physics(), move_loss_prob=0.0)
    steps = [OpticalPump(), Image(1, "m1"), RefillCycle(2, window=0.03), Image(1, "m2")]
    e = Experiment("r", tuple(steps), 40, (7, 10), roles, ((0, 1.0), (1, 0.5), (2, 1.0)), ph, 1)
    lg = run_experiment(e, seed=2)
    k1, n1 = lg.counts("m1", ("ancilla",), conditioned=False)
    k2, n2 = lg.counts("m2", ("ancilla",), conditioned=False)
    assert k1 / n1 < 0.7 and k2 / n2 > 0.97
