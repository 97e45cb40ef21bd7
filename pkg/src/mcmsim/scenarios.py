"""The five reference experiments plus user-defined sequences.

Each scenario builds one or more Experiments, runs them with the configured
seed and returns a RunLog: delimited tables (one per figure panel), a summary
of estimator outputs, and the acceptance checks tagged for that scenario.
Arms that are compared against each other share the master seed, so they see
the same atom loading, detuning maps and readout draws (common random numbers).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atomic import (
    expected_image_loss,
    light_shift_coefficient,
    saturation_from_coefficient,
    vacuum_loss_probability,
)
from .config import ScenarioConfig, check_params
from .engine import FIXED_POINT, Experiment, ExperimentLog, run_experiment
from .estimators import (
    FitError,
    fit_double_gaussian,
    fit_exponential_decay,
    fit_inverse_shift,
    fit_linear_decay,
    fit_ramsey_fringe,
    larger_error,
    scale_dummy_interval,
    scale_dummy_rate,
    site_resolved_fringes,
    wilson_interval,
    wrap_phase,
)
from .qubits import Role, make_roles
from .rearrange import refill_window
from .sequence import (
    ALL_ROLES,
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

DEFAULT_IMAGE_S = 5e-3


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    target: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": _plain(self.value), "target": self.target}


@dataclass
class RunLog:
    scenario: str
    config: dict
    experiments: dict = field(default_factory=dict)  # name -> ExperimentLog
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config": self.config,
            "summary": self.summary,
            "checks": [c.to_dict() for c in self.checks],
            "aborted_trials": {k: list(v.aborted) for k, v in self.experiments.items()},
        }

    def write(self, out_dir) -> list[Path]:
        """Write every table, per-experiment statistics and events, and summary.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, (header, rows) in self.tables.items():
            written.append(_write_csv(out / f"{name}.csv", header, rows))
        for name, lg in self.experiments.items():
            written.append(_write_csv(out / f"stats_{name}.csv", *_stats_rows(lg)))
            written.append(_write_csv(out / f"events_{name}.csv", ("trial", "step", "kind", "detail"), lg.events))
            if lg.frames:
                p = out / f"frames_{name}.csv"
                p.write_text(lg.frames)
                written.append(p)
        p = out / "summary.json"
        p.write_text(json.dumps(_plain(self.summary_dict()), indent=2, sort_keys=True) + "\n")
        written.append(p)
        return written


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _stats_rows(lg: ExperimentLog):
    header = ("label", "phase_index", "site", "trials", "bright", "present", "cond", "both", "expected",
              "expected_truth")
    rows = []
    for label, d in lg.stats.items():
        P, S = d["bright"].shape
        for k in range(P):
            for s in range(S):
                rows.append((label, k, s, int(d["trials"][k]), int(d["bright"][k, s]), int(d["present"][k, s]),
                             int(d["cond"][k, s]), int(d["both"][k, s]), d["expected"][k, s] / FIXED_POINT,
                             d["expected_truth"][k, s] / FIXED_POINT))
    return header, rows


# column headers of every table a scenario writes, so an empty run still
# produces valid files
TABLE_HEADERS = {
    "table1": {
        "table1": ("prepare", "image", "process", "base", "base_err", "data", "data_err", "ancilla",
                   "ancilla_err"),
        "table1_loss_series_1": ("index", "fraction"),
        "table1_loss_series_0": ("index", "fraction"),
    },
    "fig2": {
        "fig2b_fringes": ("scan_phase", "base", "base_shots", "hide_only", "hide_only_shots", "mcm_data",
                          "mcm_data_shots", "mcm_ancilla", "mcm_ancilla_shots"),
        "fig2b_fits": ("arm", "contrast", "contrast_err", "phase", "phase_err", "offset", "phase_shift"),
        "fig2c_histograms": ("bin_low", "bin_high", "base", "mcm_ancilla"),
        "fig2_site_fits": ("arm", "site", "row", "col", "contrast", "contrast_err", "phase", "phase_err"),
    },
    "fig3": {
        "fig3_sweep": ("shift_mhz", "arm", "contrast", "contrast_err", "contrast_loss", "contrast_loss_err",
                       "phase", "phase_err"),
        "fig3_sweep_reference_coefficient": ("shift_mhz", "arm", "contrast", "contrast_err", "contrast_loss",
                                         "contrast_loss_err", "phase", "phase_err"),
    },
    "fig4": {
        "fig4b_filling": ("image", "cycles_elapsed", "filling_refill", "filling_refill_err", "filling_norefill",
                          "filling_norefill_err", "closed_form"),
        "fig4c_contrast": ("cycles", "contrast", "contrast_err", "relative_contrast", "relative_contrast_err"),
    },
    "fig5": {
        "fig5_contrast": ("hold_s", "contrast_mot_off", "contrast_mot_off_err", "contrast_mot_on",
                          "contrast_mot_on_err", "ratio", "ratio_err"),
    },
    "custom": {
        "custom_images": ("label", "role", "bright", "shots", "fraction", "bright_conditioned",
                          "shots_conditioned", "fraction_conditioned"),
    },
}


def _table(log: RunLog, name: str, rows) -> None:
    log.tables[name] = (TABLE_HEADERS[log.scenario][name], [tuple(r) for r in rows])


# ---------------------------------------------------------------- helpers

def _roles(cfg: ScenarioConfig, layout: str | None = None) -> tuple:
    a = cfg.array
    return tuple(int(r) for r in make_roles(a.dims, layout or a.layout, a.sub_origin, a.sub_dims))


def _experiment(cfg: ScenarioConfig, name: str, steps, n_trials: int, roles=None, fill=None, physics=None,
                n_phases=None) -> Experiment:
    return Experiment(name, tuple(steps), int(n_trials), cfg.array.dims, roles or _roles(cfg),
                      cfg.array.fill if fill is None else fill, physics or cfg.physics,
                      cfg.n_phases if n_phases is None else n_phases, cfg.write_frames)


def _run(cfg: ScenarioConfig, exp: Experiment) -> ExperimentLog:
    return run_experiment(exp, cfg.seed, cfg.workers, cfg.block_size)


def _trials(cfg: ScenarioConfig, default: int) -> int:
    return default if cfg.trials is None else cfg.trials


def _fringe(lg: ExperimentLog, label: str, roles, expected: bool = False):
    frac, n = lg.fringe(label, roles, expected)
    ok = n > 0
    if ok.sum() < 4:
        return None
    phases = lg.scan_phases()[ok]
    if expected:
        return fit_ramsey_fringe(phases, frac[ok])
    return fit_ramsey_fringe(phases, frac[ok], n_shots=n[ok])


def _fringe_dict(fit):
    if fit is None:
        return None
    return {"contrast": fit.contrast, "contrast_err": fit.contrast_err, "phase": fit.phase,
            "phase_err": fit.phase_err, "offset": fit.offset}


def _within(value, target, tol) -> bool:
    return value is not None and math.isfinite(value) and abs(value - target) <= tol


def _nan(x):
    return math.nan if x is None else x


# ---------------------------------------------------------------- table 1

TABLE1_DEFAULTS = {
    "dummy_base_s": 0.2,
    "dummy_mcm_s": 0.05,
    "loss_images": 20,
    "dead_time_s": 21e-3,
    "ancilla_flip_target": 3e-3,
    "ancilla_flip_tol": 1e-3,
    "min_trial_sites": 20000,
}

# (prepare, dummy image, final image); the process is loss when final == prepare
TABLE1_DUMMY_ROWS = [(1, 1, 1), (1, 1, 0), (1, 0, 1), (1, 0, 0), (0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]


def _dummy_steps(prep, dummy, final, duration, mcm):
    hidden = ("data",) if mcm else ()
    steps = [OpticalPump(ALL_ROLES, prep), Image(prep, "pre")]
    if mcm:
        steps.append(Hide(hidden))
    steps.append(Image(dummy, "dummy", hidden=hidden, duration=duration))
    if mcm:
        steps.append(Hide(()))
    steps.append(Image(final, "final", condition="pre"))
    return steps


def scenario_table1(cfg: ScenarioConfig) -> RunLog:
    p = check_params(cfg.params, TABLE1_DEFAULTS, "table1")
    n = _trials(cfg, 1500)
    log = RunLog("table1", cfg.to_dict())
    checks, rows, summary = [], [], {}

    # distinguishability from stochastically loaded histograms
    overlap = {}
    for s in (1, 0):
        steps = [OpticalPump(ALL_ROLES, s), Image(s, "hist_base", histogram=True), Hide(("data",)),
                 Image(s, "hist_mcm", hidden=("data",), histogram=True), Hide(())]
        lg = _run(cfg, _experiment(cfg, f"overlap_{s}", steps, n, n_phases=1))
        log.experiments[lg.name] = lg
        for col, label, roles in (("base", "hist_base", None), ("ancilla", "hist_mcm", ("ancilla",))):
            h, edges = lg.histogram(label, roles)
            try:
                fit = fit_double_gaussian(h, edges)
                overlap[(s, col)] = fit.overlap_error
                summary[f"overlap_{col}_image{s}"] = fit.to_dict()
            except FitError as exc:
                overlap[(s, col)] = math.nan
                summary[f"overlap_{col}_image{s}"] = {"error": str(exc)}
        rows.append(("mixture", s, "overlap", overlap[(s, "base")], math.nan, math.nan, math.nan,
                     overlap[(s, "ancilla")], math.nan))

    # base loss from repeated images
    loss_fit = {}
    for s in (1, 0):
        steps = [OpticalPump(ALL_ROLES, s)]
        for k in range(1, p["loss_images"] + 1):
            steps.append(Image(s, f"img_{k}", condition=None if k == 1 else "img_1"))
            steps.append(Wait(p["dead_time_s"]))
        lg = _run(cfg, _experiment(cfg, f"loss_series_{s}", steps, n, n_phases=1))
        log.experiments[lg.name] = lg
        fractions = [1.0]
        for k in range(2, p["loss_images"] + 1):
            kk, nn = lg.counts(f"img_{k}")
            fractions.append(kk / nn if nn else math.nan)
        fit = fit_exponential_decay(np.arange(len(fractions)), fractions)
        loss_fit[s] = fit
        summary[f"loss_fit_image{s}"] = {**fit.to_dict(), "fractions": fractions}
        _table(log, f"table1_loss_series_{s}", enumerate(fractions))

    # dummy-image protocol
    dummy = {}
    for cond, duration in (("base", p["dummy_base_s"]), ("mcm", p["dummy_mcm_s"])):
        for prep, img, final in TABLE1_DUMMY_ROWS:
            name = f"dummy_{cond}_p{prep}_i{img}_f{final}"
            lg = _run(cfg, _experiment(cfg, name, _dummy_steps(prep, img, final, duration, cond == "mcm"), n,
                                       n_phases=1))
            log.experiments[name] = lg
            cols = {"base": None} if cond == "base" else {"data": ("data",), "ancilla": ("ancilla",)}
            for col, roles in cols.items():
                k, m = lg.counts("final", roles)
                events = m - k if final == prep else k
                raw = events / m if m else math.nan
                ci = wilson_interval(events, m) if m else (math.nan, math.nan)
                rate = scale_dummy_rate(raw, duration)
                sci = scale_dummy_interval(ci, duration)
                dummy[(prep, img, final, col)] = (rate, sci, m, events)
    for prep, img, final in TABLE1_DUMMY_ROWS:
        process = "loss" if final == prep else f"{prep}->{1 - prep}"
        row = [prep, img, process]
        for col in ("base", "data", "ancilla"):
            if col == "base" and prep == img == final:
                fit = loss_fit[prep]
                row += [fit["rate"], fit.errors["rate"]]
            else:
                rate, sci, _, _ = dummy[(prep, img, final, col)]
                row += [rate, larger_error(rate, sci)]
        rows.append(tuple(row))
    _table(log, "table1", rows)
    summary["dummy"] = {f"p{a}_i{b}_f{c}_{col}": {"rate": v[0], "interval": list(v[1]), "trial_sites": v[2],
                                                  "events": v[3]}
                        for (a, b, c, col), v in dummy.items()}

    r1 = loss_fit[1]["rate"]
    r0 = loss_fit[0]["rate"]
    checks.append(Check("table1.base_loss_image1", _within(r1, 0.005, 0.003), r1, "0.005 +/- 0.003 per image"))
    checks.append(Check("table1.base_loss_image0", _within(r0, 0.010, 0.004), r0, "0.010 +/- 0.004 per image"))
    for prep, img, final in TABLE1_DUMMY_ROWS:
        if final == prep:
            continue
        rate, _, m, _ = dummy[(prep, img, final, "base")]
        checks.append(Check(f"table1.base_flip_p{prep}_i{img}", rate <= 3e-4, rate, "<= 3e-4 per image"))
    rate, _, m, _ = dummy[(1, 1, 0, "ancilla")]
    checks.append(Check("table1.ancilla_flip_1to0_mcm",
                        _within(rate, p["ancilla_flip_target"], p["ancilla_flip_tol"]), rate,
                        f"{p['ancilla_flip_target']} +/- {p['ancilla_flip_tol']} per image"))
    sites = min(v[2] for v in dummy.values())
    checks.append(Check("table1.trial_sites", sites >= p["min_trial_sites"], sites,
                        f">= {p['min_trial_sites']} trial-sites per measurement"))
    log.summary = summary
    log.checks = checks
    return log


# ---------------------------------------------------------------- fig 2

FIG2_DEFAULTS = {"hold_s": 10e-3, "histogram_min_samples": 5000}


def fig2_sequences(hold: float = 10e-3, image_s: float = DEFAULT_IMAGE_S) -> dict:
    """Base, hiding-only and MCM arms of the Ramsey sequence with a mid-hold image."""
    side = (hold - image_s) / 2
    if side < 0:
        raise ValueError("hold must cover the image")
    readout = Readout(histogram=True)
    return {
        "base": ramsey((Wait(hold),), readout),
        "hide_only": ramsey((Wait(side), Hide(("data",)), Wait(image_s), Hide(()), Wait(side)), readout),
        "mcm": ramsey((Wait(side), Hide(("data",)), Image(1, "mcm", hidden=("data",), histogram=True), Hide(()),
                       Wait(side)), readout),
    }


def scenario_fig2(cfg: ScenarioConfig) -> RunLog:
    p = check_params(cfg.params, FIG2_DEFAULTS, "fig2")
    n = _trials(cfg, 24000)
    log = RunLog("fig2", cfg.to_dict())
    logs = {}
    for arm, steps in fig2_sequences(p["hold_s"]).items():
        logs[arm] = _run(cfg, _experiment(cfg, f"fig2_{arm}", steps, n))
        log.experiments[logs[arm].name] = logs[arm]

    fits = {
        "base": _fringe(logs["base"], "readout", ("data", "ancilla")),
        "hide_only": _fringe(logs["hide_only"], "readout", ("data",)),
        "mcm_data": _fringe(logs["mcm"], "readout", ("data",)),
        "mcm_ancilla": _fringe(logs["mcm"], "readout", ("ancilla",)),
    }
    phases = logs["base"].scan_phases()
    cols = []
    for key, lg, roles in (("base", logs["base"], ("data", "ancilla")), ("hide_only", logs["hide_only"], ("data",)),
                           ("mcm_data", logs["mcm"], ("data",)), ("mcm_ancilla", logs["mcm"], ("ancilla",))):
        cols.append(lg.fringe("readout", roles))
    rows = [(phases[k], *[v for f, m in cols for v in (f[k], int(m[k]))]) for k in range(len(phases))]
    _table(log, "fig2b_fringes", rows)
    base_phase = fits["base"].phase if fits["base"] else math.nan
    fit_rows = []
    for key, f in fits.items():
        if f is None:
            fit_rows.append((key, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan))
            continue
        fit_rows.append((key, f.contrast, f.contrast_err, f.phase, f.phase_err, f.offset,
                         float(wrap_phase(f.phase - base_phase))))
    _table(log, "fig2b_fits", fit_rows)
    shift = float(wrap_phase(fits["mcm_data"].phase - base_phase)) if fits["mcm_data"] else math.nan

    # histograms
    h_base, edges = logs["base"].histogram("readout_final")
    h_mcm, _ = logs["mcm"].histogram("mcm", ("ancilla",))
    _table(log, "fig2c_histograms", [(edges[i], edges[i + 1], int(h_base[i]), int(h_mcm[i]))
                                     for i in range(h_base.size)])
    hist_fits = {}
    for key, h in (("base", h_base), ("mcm", h_mcm)):
        try:
            hist_fits[key] = fit_double_gaussian(h, edges)
        except FitError as exc:
            hist_fits[key] = exc

    # site-resolved fringes
    site_rows, site_summary = [], {}
    for key, lg, role in (("base", logs["base"], Role.DATA), ("mcm", logs["mcm"], Role.DATA)):
        both, cond = lg.site_data("readout")
        sel = np.flatnonzero(lg.roles == role)
        res = site_resolved_fringes(phases, both[sel], cond[sel])
        site_summary[key] = {"mean_contrast": res.mean_contrast, "phase_std": res.phase_std,
                             "mean_phase": res.mean_phase, "skipped": [int(sel[i]) for i in res.skipped]}
        for i, f in zip(sel, res.fits):
            r, c = divmod(int(i), cfg.array.cols)
            site_rows.append((key, int(i), r, c, _nan(f and f.contrast), _nan(f and f.contrast_err),
                              _nan(f and f.phase), _nan(f and f.phase_err)))
    _table(log, "fig2_site_fits", site_rows)
    site_summary["mean_contrast_reduction"] = (site_summary["base"]["mean_contrast"]
                                               - site_summary["mcm"]["mean_contrast"])

    log.summary = {
        "fringes": {k: _fringe_dict(f) for k, f in fits.items()},
        "mcm_phase_shift": shift,
        "histograms": {k: (v.to_dict() if not isinstance(v, Exception) else {"error": str(v)})
                       for k, v in hist_fits.items()},
        "histogram_samples": {"base": int(h_base.sum()), "mcm": int(h_mcm.sum())},
        "site_resolved": site_summary,
    }
    c = log.checks
    base_c = fits["base"].contrast if fits["base"] else math.nan
    mcm_c = fits["mcm_data"].contrast if fits["mcm_data"] else math.nan
    anc_c = fits["mcm_ancilla"].contrast if fits["mcm_ancilla"] else math.nan
    c.append(Check("fig2.base_contrast", _within(base_c, 0.985, 0.01), base_c, "0.985 +/- 0.01"))
    c.append(Check("fig2.mcm_data_contrast", _within(mcm_c, 0.972, 0.01), mcm_c, "0.972 +/- 0.01"))
    c.append(Check("fig2.mcm_phase_shift", _within(shift, 1.59, 0.1), shift, "1.59 +/- 0.1 rad"))
    c.append(Check("fig2.ancilla_decohered", anc_c < 0.05, anc_c, "< 0.05"))
    hb = hist_fits["base"]
    ok = not isinstance(hb, Exception)
    c.append(Check("fig2c.samples", int(h_base.sum()) >= p["histogram_min_samples"], int(h_base.sum()),
                   f">= {p['histogram_min_samples']}"))
    c.append(Check("fig2c.threshold", ok and _within(hb.threshold, 9, 2), hb.threshold if ok else None, "9 +/- 2"))
    c.append(Check("fig2c.overlap_error", ok and hb.overlap_error <= 5e-4, hb.overlap_error if ok else None,
                   "<= 5e-4"))
    c.append(Check("fig2c.peak_separation", ok and _within(hb.separation, 31, 3), hb.separation if ok else None,
                   "31 +/- 3"))
    return log


# ---------------------------------------------------------------- fig 3

FIG3_DEFAULTS = {"shifts_mhz": [15.0, 25.0, 40.0, 74.0], "hold_s": 10e-3, "reference_coefficient": 164.0,
                 "reference_sweep": True}


def unwrap_inverse(shifts, phases):
    """Unwrap phases measured mod 2*pi along decreasing shift.

    The second-largest shift takes the smallest branch not below the first;
    after that each point takes the branch nearest the straight-line
    extrapolation in 1/shift through the previous two.
    """
    order = np.argsort(shifts)[::-1]
    x = 1.0 / np.asarray(shifts, float)[order]
    y = np.asarray(phases, float)[order].copy()
    for i in range(1, len(y)):
        if i == 1:
            y[i] = y[0] + (y[i] - y[0]) % (2 * math.pi)
        else:
            pred = y[i - 1] + (y[i - 1] - y[i - 2]) * (x[i] - x[i - 1]) / (x[i - 1] - x[i - 2])
            y[i] = y[i] + 2 * math.pi * round((pred - y[i]) / (2 * math.pi))
    out = np.empty_like(y)
    out[order] = y
    return out


def _fig3_sweep(cfg, shifts, hold, physics, n, tag):
    seqs = fig2_sequences(hold)
    base = _run(cfg, _experiment(cfg, f"fig3{tag}_base", seqs["base"], n, physics=physics))
    out = {"base": base, "arms": {}}
    f_base = _fringe(base, "readout", ("data",))
    rows = []
    for d in shifts:
        ph = replace(physics, hide_mean_mhz=float(d))
        for arm in ("hide_only", "mcm"):
            lg = _run(cfg, _experiment(cfg, f"fig3{tag}_{arm}_{d:g}", seqs[arm], n, physics=ph))
            out["arms"][(arm, d)] = lg
            f = _fringe(lg, "readout", ("data",))
            loss = 1 - f.contrast / f_base.contrast
            loss_err = math.hypot(f.contrast_err / f_base.contrast,
                                  f.contrast * f_base.contrast_err / f_base.contrast**2)
            rows.append([d, arm, f.contrast, f.contrast_err, loss, loss_err,
                         float(wrap_phase(f.phase - f_base.phase)), math.hypot(f.phase_err, f_base.phase_err)])
    mcm_rows = [r for r in rows if r[1] == "mcm"]
    unwrapped = unwrap_inverse([r[0] for r in mcm_rows], [r[6] for r in mcm_rows])
    for r, u in zip(mcm_rows, unwrapped):
        r[6] = float(u)
    fit = fit_inverse_shift([r[0] for r in mcm_rows], [r[6] for r in mcm_rows], sigma=[r[7] for r in mcm_rows],
                            saturation_reference=(physics.constants.gamma, DEFAULT_IMAGE_S))
    out["rows"] = rows
    out["fit"] = fit
    return out


def scenario_fig3(cfg: ScenarioConfig) -> RunLog:
    p = check_params(cfg.params, FIG3_DEFAULTS, "fig3")
    n = _trials(cfg, 6000)
    log = RunLog("fig3", cfg.to_dict())
    shifts = [float(s) for s in p["shifts_mhz"]]
    physics = cfg.physics
    s_nominal = physics.imaging_params(1).saturation
    sweep = _fig3_sweep(cfg, shifts, p["hold_s"], physics, n, "")
    for lg in [sweep["base"], *sweep["arms"].values()]:
        log.experiments[lg.name] = lg
    _table(log, "fig3_sweep", sweep["rows"])
    fit = sweep["fit"]
    closed = light_shift_coefficient(s_nominal, physics.constants.gamma, DEFAULT_IMAGE_S)
    log.summary = {"inverse_fit": fit.to_dict(), "closed_form_coefficient": closed, "saturation": s_nominal}
    c = log.checks
    coeff = fit["coefficient"]
    c.append(Check("fig3.coefficient", _within(coeff, closed, 0.1 * closed), coeff,
                   f"within 10% of {closed:.2f} rad MHz"))
    ref = max(shifts)
    for r in sweep["rows"]:
        if r[1] == "hide_only":
            c.append(Check(f"fig3.hide_only_{r[0]:g}", abs(r[4]) <= max(3 * r[5], 0.005) and abs(r[6]) <= 0.05,
                           {"contrast_loss": r[4], "phase": r[6]}, "contrast loss and phase consistent with 0"))
        elif r[0] == ref == 74.0:
            c.append(Check("fig3.combined_phase_74", _within(r[6], 1.59, 0.1), r[6], "1.59 +/- 0.1 rad"))

    if p["reference_sweep"]:
        s_reference = saturation_from_coefficient(p["reference_coefficient"], physics.constants.gamma, DEFAULT_IMAGE_S)
        ph = replace(physics, imaging=tuple(sorted({**dict(physics.imaging), "saturation": s_reference}.items())))
        reference = _fig3_sweep(cfg, shifts, p["hold_s"], ph, n, "_reference")
        for lg in [reference["base"], *reference["arms"].values()]:
            log.experiments[lg.name] = lg
        _table(log, "fig3_sweep_reference_coefficient", reference["rows"])
        s_fit = reference["fit"].extra["saturation"]
        log.summary["reference_coefficient_fit"] = reference["fit"].to_dict()
        log.summary["reference_coefficient_saturation_true"] = s_reference
        c.append(Check("fig3.inferred_saturation", _within(s_fit, 1.2, 0.4), s_fit, "1.2 +/- 0.4"))
    return log


# ---------------------------------------------------------------- fig 4

FIG4_DEFAULTS = {
    "max_cycles": 16,
    "cycles": [0, 2, 4, 6, 8, 10, 12, 14, 16],
    "cycle_loss": 0.011,
    "hidden_excess_decoherence": 0.004,
    "ideal_trials": 200,
    "ideal_check": True,
}


def fig4_ancilla_excess_loss(physics, cycle_loss: float, window: float) -> float:
    """Excess per-image loss that makes the closed-form per-cycle loss of an
    imaged ancilla equal ``cycle_loss``."""
    params = physics.imaging_params(1, overrides=(("excess_loss", 0.0),))
    base = expected_image_loss(params, physics.constants)
    vac = (1 - vacuum_loss_probability(params.duration_s, physics.constants)) * (
        1 - vacuum_loss_probability(window + physics.timing.overhead, physics.constants))
    excess = 1 - base - (1 - cycle_loss) / vac
    if excess < 0:
        raise ValueError(f"per-cycle loss {cycle_loss} is below the modelled floor")
    return float(excess)


def fig4_sequence(n_cycles: int, max_cycles: int, window: float, total_hold: float, image_overrides,
                  refill: bool = True) -> tuple:
    """N cycles of {pump ancillae and reservoir, hidden image, refill} inside
    an echoed Ramsey sequence of fixed total hold.

    Without refill, images after the first are conditioned on the first so
    that their statistics measure survival of the initially present ancillae.
    """
    if n_cycles % 2:
        raise ValueError("cycle count must be even so the echo sits between cycles")
    cycle = DEFAULT_IMAGE_S + window
    pad = total_hold - n_cycles * cycle
    if pad < 0:
        raise ValueError("cycles do not fit into the total hold")
    half = []
    body = []
    for k in range(1, n_cycles + 1):
        body += [OpticalPump(("ancilla", "reservoir")),
                 Image(1, f"mcm_{k}", hidden=("data",), overrides=image_overrides,
                       condition=None if refill or k == 1 else "mcm_1"),
                 RefillCycle(max_cycles, window, enabled=refill)]
        if k == n_cycles // 2:
            half = body
            body = []
    if n_cycles == 0:
        middle = (Wait(pad / 2), Echo(), Wait(pad / 2))
    else:
        middle = (Wait(pad / 2), Hide(("data",)), *half, Echo(), *body, Hide(()), Wait(pad / 2))
    return (OpticalPump(ALL_ROLES), *ramsey(middle))


def scenario_fig4(cfg: ScenarioConfig) -> RunLog:
    p = check_params(cfg.params, FIG4_DEFAULTS, "fig4")
    n = _trials(cfg, 3000)
    log = RunLog("fig4", cfg.to_dict())
    a = cfg.array
    roles = _roles(cfg, "subarray")
    fill = ((int(Role.DATA), a.sub_fill), (int(Role.ANCILLA), a.sub_fill), (int(Role.RESERVOIR), a.fill))
    ph = cfg.physics
    window = refill_window(p["max_cycles"], ph.total_hold_s)
    excess = fig4_ancilla_excess_loss(ph, p["cycle_loss"], window)
    overrides = (("excess_loss", excess), ("hidden_excess_decoherence", p["hidden_excess_decoherence"]))
    cycles = sorted(int(x) for x in p["cycles"])
    if p["max_cycles"] not in cycles:
        cycles.append(p["max_cycles"])

    def run(name, N, refill=True, physics=ph, trials=n):
        seq = fig4_sequence(N, p["max_cycles"], window, ph.total_hold_s, overrides, refill)
        lg = _run(cfg, _experiment(cfg, name, seq, trials, roles=roles, fill=fill, physics=physics))
        log.experiments[name] = lg
        return lg

    runs = {N: run(f"fig4_refill_N{N}", N) for N in cycles}
    norefill = run(f"fig4_norefill_N{p['max_cycles']}", p["max_cycles"], refill=False)

    # filling
    full = runs[p["max_cycles"]]
    n_anc = int(np.sum(np.asarray(roles) == Role.ANCILLA))
    fill_rows, fill_ok, follow_ok = [], True, True
    for k in range(1, p["max_cycles"] + 1):
        kk, nn = full.counts(f"mcm_{k}", ("ancilla",), conditioned=False)
        f_on = kk / nn
        e_on = math.sqrt(f_on * (1 - f_on) / nn)
        if k == 1:
            f_off, e_off = 1.0, 0.0
        else:
            k2, n2 = norefill.counts(f"mcm_{k}", ("ancilla",))
            f_off = k2 / n2
        expect = (1 - p["cycle_loss"]) ** (k - 1)
        if k > 1:
            e_off = math.sqrt(expect * (1 - expect) / n2)
            follow_ok &= abs(f_off - expect) <= 3 * e_off
        fill_ok &= f_on >= 0.98
        fill_rows.append((k, k - 1, f_on, e_on, f_off, e_off, expect))
    _table(log, "fig4b_filling", fill_rows)

    # data contrast
    fits = {N: _fringe(lg, "readout", ("data",)) for N, lg in runs.items()}
    c0 = fits[0] if 0 in fits else None
    con_rows, rel, rel_err, Ns = [], [], [], []
    for N in cycles:
        f = fits[N]
        if c0 is None or f is None:
            continue
        r = f.contrast / c0.contrast
        re = math.hypot(f.contrast_err / c0.contrast, f.contrast * c0.contrast_err / c0.contrast**2)
        if N == 0:
            re = 0.0
        con_rows.append((N, f.contrast, f.contrast_err, r, re))
        Ns.append(N)
        rel.append(r)
        rel_err.append(re)
    _table(log, "fig4c_contrast", con_rows)
    per_cycle = fit_linear_decay(Ns, rel) if len(Ns) >= 3 else None
    log.summary = {
        "refill_window_s": window,
        "ancilla_excess_loss": excess,
        "ancillae_per_trial": n_anc,
        "contrast_loss_per_cycle": per_cycle.to_dict() if per_cycle else None,
        "refill_moves": _refill_totals(full),
    }
    c = log.checks
    c.append(Check("fig4.filling_refill", bool(fill_ok), min(r[2] for r in fill_rows), ">= 0.98 for all N <= 16"))
    c.append(Check("fig4.filling_norefill", bool(follow_ok),
                   max(abs(r[4] - r[6]) / r[5] for r in fill_rows if r[5] > 0),
                   "within 3 binomial sigma of (1 - 0.011)^N"))
    rate = per_cycle["rate"] if per_cycle else math.nan
    c.append(Check("fig4.contrast_loss_per_cycle", 0.005 <= rate <= 0.015, rate, "in [0.005, 0.015]"))

    if p["ideal_check"]:
        ideal = {N: run(f"fig4_ideal_N{N}", N, physics=ph.with_ideal(), trials=p["ideal_trials"]) for N in cycles}
        ref = _fringe(ideal[cycles[0]], "readout", ("data",), expected=True)
        devs = []
        for N, lg in ideal.items():
            f = _fringe(lg, "readout", ("data",), expected=True)
            devs.append(abs(f.contrast / ref.contrast - 1))
        log.summary["ideal_relative_contrast_max_deviation"] = max(devs)
        c.append(Check("fig4.echo_ideal", max(devs) <= 1e-6, max(devs), "relative contrast 1 +/- 1e-6"))
    return log


def _refill_totals(lg: ExperimentLog) -> dict:
    tot = {"moves": 0, "completed": 0, "lost": 0, "stale": 0, "collisions": 0, "dropped": 0, "unmatched": 0}
    for _, _, kind, detail in lg.events:
        if kind != "refill":
            continue
        for part in detail.split(";"):
            key, val = part.split("=")
            if key in tot:
                tot[key] += int(val)
    return tot


# ---------------------------------------------------------------- fig 5

FIG5_DEFAULTS = {"hold_times_s": [0.25, 0.5, 1.0, 1.5, 2.0]}


def fig5_sequence(hold: float, mot: bool) -> tuple:
    half = (MotLoad if mot else Wait)(hold / 2)
    return ramsey((half, Echo(), half))


def scenario_fig5(cfg: ScenarioConfig) -> RunLog:
    p = check_params(cfg.params, FIG5_DEFAULTS, "fig5")
    n = _trials(cfg, 6000)
    log = RunLog("fig5", cfg.to_dict())
    rows, T, ratio, ratio_err = [], [], [], []
    for hold in p["hold_times_s"]:
        fits = {}
        for mot in (False, True):
            name = f"fig5_{'mot' if mot else 'nomot'}_{hold:g}"
            lg = _run(cfg, _experiment(cfg, name, fig5_sequence(float(hold), mot), n))
            log.experiments[name] = lg
            fits[mot] = _fringe(lg, "readout", ("data", "ancilla"))
        off, on = fits[False], fits[True]
        r = on.contrast / off.contrast
        re = math.hypot(on.contrast_err / off.contrast, on.contrast * off.contrast_err / off.contrast**2)
        rows.append((hold, off.contrast, off.contrast_err, on.contrast, on.contrast_err, r, re))
        T.append(float(hold))
        ratio.append(r)
        ratio_err.append(re)
    _table(log, "fig5_contrast", rows)
    fit = fit_linear_decay(T, ratio)
    log.summary = {"linear_decay": fit.to_dict()}
    rate = fit["rate"]
    log.checks.append(Check("fig5.mot_decay_rate", _within(rate, 0.030, 0.005), rate, "0.030 +/- 0.005 per s"))
    return log


# ---------------------------------------------------------------- custom

def scenario_custom(cfg: ScenarioConfig) -> RunLog:
    n = _trials(cfg, 1000)
    log = RunLog("custom", cfg.to_dict())
    exp = _experiment(cfg, "custom", cfg.sequence, n)
    lg = _run(cfg, exp)
    log.experiments["custom"] = lg
    rows, fits = [], {}
    for label in lg.stats:
        for role in ALL_ROLES:
            k, m = lg.counts(label, (role,), conditioned=False)
            kc, mc = lg.counts(label, (role,))
            rows.append((label, role, k, m, k / m if m else math.nan, kc, mc, kc / mc if mc else math.nan))
    _table(log, "custom_images", rows)
    if cfg.n_phases >= 4:
        for step in cfg.sequence:
            if isinstance(step, Readout):
                for role in ALL_ROLES:
                    try:
                        fits[f"{step.label}.{role}"] = _fringe_dict(_fringe(lg, step.label, (role,)))
                    except ValueError:
                        fits[f"{step.label}.{role}"] = None
    log.summary = {"fringes": fits}
    return log


SCENARIO_FUNCS = {
    "table1": scenario_table1,
    "fig2": scenario_fig2,
    "fig3": scenario_fig3,
    "fig4": scenario_fig4,
    "fig5": scenario_fig5,
    "custom": scenario_custom,
}


def run_scenario(cfg: ScenarioConfig) -> RunLog:
    """Run one scenario. With zero trials the log is empty apart from the
    table headers (and, for custom sequences, the empty statistics)."""
    if cfg.scenario not in SCENARIO_FUNCS:
        raise ValueError(f"unknown scenario {cfg.scenario!r}")
    if cfg.trials == 0 and cfg.scenario != "custom":
        log = RunLog(cfg.scenario, cfg.to_dict())
        for name in TABLE_HEADERS[cfg.scenario]:
            _table(log, name, [])
        return log
    return SCENARIO_FUNCS[cfg.scenario](cfg)


__all__ = ["Check", "RunLog", "run_scenario", "SCENARIO_FUNCS", "fig2_sequences", "fig4_sequence",
           "fig5_sequence", "unwrap_inverse", "TABLE_HEADERS"]
