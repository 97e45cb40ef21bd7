import math

import pytest
import yaml

from mcmsim.config import (
    MAX_SEED,
    ConfigError,
    Physics,
    ScenarioConfig,
    check_params,
    config_from_dict,
    load_config,
)
from mcmsim.sequence import (
    Echo,
    Hide,
    Image,
    OpticalPump,
    Pulse,
    Readout,
    RefillCycle,
    SequenceError,
    Wait,
    image_labels,
    parse_sequence,
    ramsey,
    validate_sequence,
)

# ---------------------------------------------------------------- config

def test_defaults_carry_calibrated_values():
    cfg = config_from_dict({}, "fig2")
    assert cfg.scenario == "fig2" and cfg.seed == 0 and cfg.trials is None
    assert cfg.array.dims == (7, 10) and cfg.array.fill == 0.5
    p = cfg.physics
    assert p.hide_mean_mhz == 74.0 and p.hide_rel_std == pytest.approx(6 / 74)
    assert p.threshold == 9.0 and p.rabi_hz == 1.4e3
    assert p.echo_dephasing_rate == pytest.approx(1 / 3.3) and p.mot_dephasing_rate == 0.03
    assert p.hide_disorder == "static"
    assert cfg.n_phases == 12


def test_overrides_apply():
    cfg = config_from_dict({
        "seed": 12, "trials": 50, "array": {"rows": 3, "cols": 4, "fill": 0.7},
        "imaging": {"saturation": 1.5}, "hiding": {"mean_shift_mhz": 40, "disorder": "per_trial"},
        "noise": {"ideal": True}, "refill": {"handoff_time": 2e-3, "move_loss_prob": 0.0},
        "constants": {"trap_depth_uk": 400}, "scan": {"n_phases": 8}, "params": {"hold_s": 0.02},
    }, "fig2")
    assert cfg.seed == 12 and cfg.trials == 50 and cfg.array.dims == (3, 4)
    assert cfg.physics.imaging_params(1).saturation == 1.5
    assert cfg.physics.hide_mean_mhz == 40 and cfg.physics.hide_disorder == "per_trial"
    assert cfg.physics.ideal and cfg.physics.timing.handoff_time == 2e-3
    assert cfg.physics.constants.trap_depth_uk == 400 and cfg.n_phases == 8


@pytest.mark.parametrize("data,key", [
    ({"array": {"fil": 0.5}}, "array.fil"),
    ({"bogus": 1}, "config.bogus"),
    ({"array": {"fill": 1.5}}, "array.fill"),
    ({"array": {"layout": "hex"}}, "array.layout"),
    ({"imaging": {"saturation": -1}}, "imaging.saturation"),
    ({"imaging": {"target_state": 1}}, "imaging.target_state"),
    ({"noise": {"pulse_depolarization": 1.0}}, "noise.pulse_depolarization"),
    ({"noise": {"ideal": "yes"}}, "noise.ideal"),
    ({"hiding": {"mean_shift_mhz": 0}}, "hiding.mean_shift_mhz"),
    ({"hiding": {"disorder": "random"}}, "hiding.disorder"),
    ({"seed": -1}, "seed"),
    ({"seed": MAX_SEED + 1}, "seed"),
    ({"trials": 1.5}, "trials"),
    ({"version": 2}, "version"),
    ({"camera": {"background_std": 0}}, "camera.background_std"),
    ({"refill": {"move_loss_prob": 2}}, "refill.move_loss_prob"),
    ({"constants": {"gamma_linewidth_hz": "fast"}}, "constants.gamma_linewidth_hz"),
    ({"scan": {"n_phases": 0}}, "scan.n_phases"),
    ({"array": []}, "array"),
])
def test_invalid_config_names_key(data, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(data, "fig2")
    assert exc.value.key == key
    assert str(exc.value).startswith(key)


def test_scenario_validation():
    with pytest.raises(ConfigError, match="scenario"):
        config_from_dict({}, "fig9")
    with pytest.raises(ConfigError, match="sequence"):
        config_from_dict({}, "custom")


def test_load_config_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\ntrials: 10\nsequence:\n  - pulse: {}\n  - readout: {}\n")
    cfg = load_config(path, "custom")
    assert cfg.seed == 3 and len(cfg.sequence) == 2
    path.write_text("seed: [1\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(path, "fig2")
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(path, "fig2")
    assert load_config(None, "fig5").scenario == "fig5"


def test_config_dump_round_trips():
    cfg = config_from_dict({"seed": 9, "trials": 20, "imaging": {"saturation": 1.3}}, "fig3")
    d = cfg.to_dict()
    text = yaml.safe_dump(d)
    again = config_from_dict(yaml.safe_load(text), "fig3")
    assert again.to_dict() == d


def test_check_params():
    assert check_params({"a": 2}, {"a": 1, "b": 3}, "x") == {"a": 2, "b": 3}
    with pytest.raises(ConfigError, match=r"params\[x\]\.c"):
        check_params({"c": 1}, {"a": 1}, "x")


def test_ideal_physics_drops_hidden_decoherence():
    p = Physics(imaging=(("hidden_excess_decoherence", 0.01),))
    assert p.imaging_params(1).hidden_excess_decoherence == 0.01
    assert p.with_ideal().imaging_params(1).hidden_excess_decoherence == 0.0


def test_scenario_config_defaults():
    assert ScenarioConfig().scenario == "custom"


# ---------------------------------------------------------------- sequences

def test_parse_all_step_kinds():
    steps = parse_sequence([
        {"pulse": {"area": math.pi, "phase": 0.5, "scanned": True}},
        {"wait": 0.01}, {"mot_load": {"duration": 0.2}},
        {"hide": {"roles": ["data"]}},
        {"image": {"state": 1, "label": "m", "hidden": "data", "duration": 0.05}},
        {"unhide": {}},
        {"optical_pump": {"roles": ["ancilla"]}},
        {"refill": {"n_cycles": 4}},
        {"echo": {}},
        {"readout": {"state": 0}},
    ])
    kinds = [type(s).__name__ for s in steps]
    assert kinds == ["Pulse", "Wait", "MotLoad", "Hide", "Image", "Hide", "OpticalPump", "RefillCycle", "Echo",
                     "Readout"]
    assert steps[0] == Pulse(math.pi, 0.5, True)
    assert steps[4].hidden == ("data",)
    validate_sequence(steps)
    assert image_labels(steps) == ["m", "readout", "readout_final"]


def test_repeat_expands_labels():
    steps = parse_sequence([{"repeat": {"times": 3, "steps": [
        {"image": {"label": "img_{k}", "condition": None}}, {"wait": 0.001}]}}])
    assert [s.label for s in steps if isinstance(s, Image)] == ["img_1", "img_2", "img_3"]
    assert len(steps) == 6


@pytest.mark.parametrize("items,match", [
    ([{"jump": {}}], "unknown step kind"),
    ([{"pulse": {"angle": 1}}], "angle"),
    ([{"image": {"state": 1}}], "label"),
    ([{"hide": {"roles": ["qubits"]}}], "unknown role"),
    ([{"pulse": {}, "wait": 1}], "single-key"),
    ({"pulse": {}}, "list"),
    ([{"repeat": {"times": 2, "body": []}}], "repeat"),
])
def test_parse_errors(items, match):
    with pytest.raises(SequenceError, match=match):
        parse_sequence(items)


@pytest.mark.parametrize("steps,match", [
    ((Hide(("data",)), Image(1, "a")), "expects hidden"),
    ((Image(1, "a", hidden=("data",)),), "expects hidden"),
    ((Image(1, "a"), Image(1, "a")), "duplicate"),
    ((Image(1, "a", condition="b"),), "earlier image"),
    ((Hide(("data",)), Readout()), "hiding on"),
    ((RefillCycle(2),), "earlier image"),
    ((Image(2, "a"),), "state"),
    ((Wait(-1.0),), "non-negative"),
    ((Pulse(-1.0),), "non-negative"),
    ((OpticalPump(state=3),), "pump state"),
    ((Image(1, "a", duration=0.0),), "positive"),
    (("nonsense",), "unknown step"),
])
def test_validation_errors(steps, match):
    with pytest.raises(SequenceError, match=match):
        validate_sequence(steps)


def test_ramsey_helper_layout():
    seq = ramsey((Wait(0.01),))
    assert seq[0] == Pulse(math.pi / 2)
    assert seq[2] == Pulse(math.pi / 2, math.pi, scanned=True)
    assert isinstance(seq[-1], Readout)
    validate_sequence((Echo(),) + seq)


def test_sequence_error_becomes_config_error():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"sequence": [{"image": {"state": 1}}]}, "custom")
    assert exc.value.key == "sequence"
