"""Command-line front end.

Verbs: powerflow, simulate, analyze, freqscan, design, validate. Global
flags: --config, --seed, --out-dir, --jobs. Exit status is 0 on success,
1 on a numerical failure and 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import REFERENCE_SCENARIO, ConfigError, ScenarioConfig, dump_json, load_config
from .dynsim import SimulationError, SimulationModel, TimeSeriesSet, event_to_dict, simulate
from .grid import InitializationError, NetworkError, PowerflowError, ac_powerflow
from .modal import ModalError, analyze_ringdown, damping_report, mode_shapes, preprocess
from .mtdc import DcNetworkError, DcPowerflowError, sequential_acdc_powerflow
from .pipeline import (attach_sdc, converter_rating, design_for_plant, identify_plant,
                       validate_design)
from .sdc import DesignError, SdcParams, placement_residual
from .sysid import IdentificationError, TransferFunctionModel

log = logging.getLogger("macrogrid")

NUMERICAL_ERRORS = (PowerflowError, DcPowerflowError, SimulationError, ModalError,
                    IdentificationError, DesignError, InitializationError, np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


def _manifest(cfg: ScenarioConfig, verb: str, **extra) -> dict:
    return {"command": verb, "scenario": cfg.name, "config_hash": cfg.hash(), "seed": cfg.seed,
            "source": str(cfg.source) if cfg.source else None, **extra}


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# -- verbs ------------------------------------------------------------------

def cmd_powerflow(cfg: ScenarioConfig, args) -> dict:
    sol = cfg.solver
    if cfg.mtdc is not None:
        res = sequential_acdc_powerflow(cfg.ei, cfg.wi, cfg.mtdc, tol=sol["outer_tol"],
                                        max_outer=sol["max_outer"], ac_tol=sol["pf_tol"])
        pfs, dc = res.ac, res.dc
        summary = {"outer_iterations": res.iterations, **res.transfer_summary(),
                   "dc_current_balance": dc.current_balance(cfg.mtdc)}
    else:
        pfs = {n.name: ac_powerflow(n, tol=sol["pf_tol"]) for n in (cfg.ei, cfg.wi) if n is not None}
        dc, summary = None, {}
    out = _out(args)
    files = []
    for name, pf in pfs.items():
        files += [p.name for p in pf.to_csv(out / name)]
        summary[f"{name}_iterations"] = pf.iterations
        summary[f"{name}_mismatch"] = pf.mismatch
    if dc is not None:
        files += [p.name for p in dc.to_csv(out / "mtdc")]
    summary["files"] = files
    dump_json(_manifest(cfg, "powerflow", summary=summary), out / "powerflow.json")
    return summary


def cmd_simulate(cfg: ScenarioConfig, args) -> dict:
    sol = cfg.solver
    ts = simulate(cfg.ei, cfg.wi, cfg.mtdc, events=cfg.events, duration=sol["duration"],
                  dt=sol["dt"], channels=cfg.channels, output_rate=sol["output_rate"], seed=cfg.seed)
    ts.meta.update(config_hash=cfg.hash(), scenario=cfg.name)
    out = _out(args)
    path = ts.to_csv(out / "timeseries.csv")
    return {"file": path.name, "samples": len(ts), "channels": ts.names}


def _analyze_one(path: str, channels, t_start, opts: dict) -> dict:
    ts = TimeSeriesSet.from_csv(path)
    win = ts.slice(t_start, min(ts.t_end, t_start + opts["window"]))
    names = channels or [n for n in win.names if n.endswith(":freq") or n.endswith(":speed")]
    if not names:
        raise UsageError(f"{path}: no frequency or speed channels to analyse")
    lead = names[0]
    modes = analyze_ringdown(win, lead, band=tuple(opts["band"]), method=opts["method"],
                             order=opts["order"], fs=opts["fs"], min_energy=opts["min_energy"])
    flags = damping_report(modes, opts["zeta_min"])
    pre = preprocess(win.select(names), tuple(opts["band"]))
    shapes = mode_shapes(pre, list(modes), names, residual_warn=opts["residual_warn"])
    return {
        "input": str(path), "channel": lead, "window": [win.t0, win.t_end],
        "rel_error": modes.rel_error,
        "modes": [{**m.to_dict(), "critical": f.critical, "unstable": f.unstable}
                  for m, f in zip(modes, flags)],
        "shapes": [s.to_dict() for s in shapes],
    }


def cmd_analyze(cfg: ScenarioConfig, args) -> dict:
    out = Path(args.out_dir)
    inputs = args.input or [str(out / "timeseries.csv")]
    for p in inputs:
        _require(Path(p), "time series")
    opts = dict(cfg.analysis)
    if args.window is not None:
        opts["window"] = args.window
    t_start = args.t_start
    if t_start is None:
        t_start = max((e.end for e in cfg.events), default=0.0)
    channels = args.channel or opts["channels"]
    jobs = max(1, args.jobs)
    if jobs > 1 and len(inputs) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            reports = list(ex.map(_analyze_one, inputs, [channels] * len(inputs),
                                  [t_start] * len(inputs), [opts] * len(inputs)))
    else:
        reports = [_analyze_one(p, channels, t_start, opts) for p in inputs]
    out.mkdir(parents=True, exist_ok=True)
    for k, rep in enumerate(reports):
        tag = "" if len(reports) == 1 else f"_{k}"
        dump_json(_manifest(cfg, "analyze", **rep), out / f"modes{tag}.json")
        _shapes_csv(rep, out / f"mode_shapes{tag}.csv")
    crit = [m for r in reports for m in r["modes"] if m["critical"]]
    return {"reports": len(reports), "critical_modes": crit}


def _shapes_csv(rep: dict, path: Path):
    with open(path, "w") as fh:
        fh.write("mode_freq_hz,mode_damping_ratio,channel,amplitude,phase_deg\n")
        for s in rep["shapes"]:
            m = s["mode"]
            for c, a, p in zip(s["channels"], s["amplitude"], s["phase_deg"]):
                fh.write(f"{m['freq_hz']!r},{m['damping_ratio']!r},{c},{a!r},{p!r}\n")


def _scan_settings(cfg: ScenarioConfig, args):
    fs = dict(cfg.freqscan)
    conv = args.converter or fs["converter"]
    output = args.output or fs["output"]
    if not conv or not output:
        raise ConfigError("freqscan: converter and output channel are required")
    if cfg.mtdc is None:
        raise ConfigError("freqscan: the scenario has no MTDC system")
    return fs, conv, output


def cmd_freqscan(cfg: ScenarioConfig, args) -> dict:
    fs, conv, output = _scan_settings(cfg, args)
    model = SimulationModel(cfg.ei, cfg.wi, attach_sdc(cfg.mtdc, conv, None))
    if output not in model.available_channels():
        raise ConfigError(f"freqscan: unknown output channel {output!r}")
    dt = fs["dt"] or cfg.solver["dt"]
    res = identify_plant(model, conv, output, seed=cfg.seed, band=fs["band"], step=fs["step"],
                         amp_range=fs["amp_range"], clamp_frac=fs["clamp_frac"], dt=dt,
                         preroll=fs["preroll"], periods=fs["periods"], order=fs["order"],
                         fit_band=fs["fit_band"], search=tuple(cfg.analysis["band"]))
    out = _out(args)
    res.frf.to_csv(out / "frf.csv")
    res.tf.to_json(out / "tf.json", converter=conv, output=output, fit_band=list(res.fit_band),
                   config_hash=cfg.hash(), seed=cfg.seed)
    dump_json(_manifest(cfg, "freqscan", converter=conv, output=output, probe=res.probe.to_dict(),
                        dt=dt, quality=res.tf.quality, fit_band=list(res.fit_band),
                        poles=[[p.real, p.imag] for p in res.tf.poles]),
              out / "freqscan.json")
    pk = int(np.argmax(np.abs(res.frf.values)))
    return {"peak_hz": float(res.frf.freqs[pk]), "order": list(res.tf.order), "quality": res.tf.quality}


def cmd_design(cfg: ScenarioConfig, args) -> dict:
    out = Path(args.out_dir)
    tf_path = _require(Path(args.tf) if args.tf else out / "tf.json", "transfer function")
    tf = TransferFunctionModel.from_json(tf_path)
    meta = json.loads(tf_path.read_text())
    d = dict(cfg.design)
    if args.zeta_target is not None:
        d["zeta_target"] = args.zeta_target
    conv = meta.get("converter") or cfg.validate["converter"] or cfg.freqscan["converter"]
    limit = None
    if d["limit_frac"] is not None and cfg.mtdc is not None and conv:
        limit = d["limit_frac"] * converter_rating(cfg.mtdc, conv)
    p, info, target = design_for_plant(
        tf, d["zeta_target"], d["target_freq_hz"], d["max_phase_per_block"], d["m_max"], d["Tw"],
        limit, d["sigma_margin"], d["tune_gain"], tuple(cfg.analysis["band"]))
    lam = info.lambda_cl
    extra = {"converter": conv, "feedback": meta.get("output"),
             "lambda_ol": [target.lambda_ol.real, target.lambda_ol.imag],
             "lambda_cl": [lam.real, lam.imag], "zeta_target": d["zeta_target"],
             "phi_deg": info.phi_deg, "alpha": info.alpha, "alpha_nominal": info.alpha_nominal,
             "placement_residual": placement_residual(tf, p, lam), "notes": info.notes,
             "config_hash": cfg.hash(), "seed": cfg.seed}
    out.mkdir(parents=True, exist_ok=True)
    p.to_json(out / "sdc_params.json", **extra)
    return {**p.to_dict(), "placement_residual": extra["placement_residual"]}


def cmd_validate(cfg: ScenarioConfig, args) -> dict:
    out = Path(args.out_dir)
    p_path = _require(Path(args.params) if args.params else out / "sdc_params.json", "SDC parameters")
    blob = json.loads(p_path.read_text())
    params = SdcParams.from_dict(blob)
    v = cfg.validate
    conv = args.converter or v["converter"] or blob.get("converter")
    feedback = v["feedback"] or blob.get("feedback")
    event = v["event"] or (cfg.events[0] if cfg.events else None)
    if not conv or not feedback or event is None:
        raise ConfigError("validate: converter, feedback and event are required")
    if cfg.mtdc is None:
        raise ConfigError("validate: the scenario has no MTDC system")
    lam = blob.get("lambda_ol")
    if lam is None:
        raise UsageError(f"{p_path}: lambda_ol missing; produce the file with 'design'")
    f_target = abs(lam[1]) / (2 * np.pi)
    trajectories: dict = {}
    rep = validate_design(cfg.ei, cfg.wi, cfg.mtdc, conv, params, feedback, event, f_target,
                          window=v["window"], dt=cfg.solver["dt"], zeta_target=v["zeta_target"],
                          contingency=v["contingency"], zeta_contingency=v["zeta_contingency"],
                          max_degradation=v["max_degradation"], analysis=cfg.analysis,
                          channels=v["channels"], trajectories=trajectories)
    out.mkdir(parents=True, exist_ok=True)
    for label, ts in trajectories.items():
        ts.meta.update(config_hash=cfg.hash())
        ts.to_csv(out / f"validate_{label}.csv")
    dump_json(_manifest(cfg, "validate", event=event_to_dict(event),
                        contingency=event_to_dict(v["contingency"]) if v["contingency"] else None,
                        report=rep.to_dict()), out / "validation.json")
    return {"zeta_off": rep.off.damping_ratio, "zeta_on": rep.on.damping_ratio,
            "contingency": rep.contingency.damping_ratio if rep.contingency else None,
            "passed": rep.passed}


VERBS = {"powerflow": cmd_powerflow, "simulate": cmd_simulate, "analyze": cmd_analyze,
         "freqscan": cmd_freqscan, "design": cmd_design, "validate": cmd_validate}


# -- argument parsing ---------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, top: bool):
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(str(REFERENCE_SCENARIO)),
                   help="scenario YAML (default: shipped reference scenario)")
    p.add_argument("--seed", type=int, default=d(None), help="override the scenario seed")
    p.add_argument("--out-dir", default=d("out"), help="output directory (default: out)")
    p.add_argument("--jobs", type=int, default=d(1), help="parallel workers for batch analysis")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="macrogrid", description=__doc__.splitlines()[0])
    _global_flags(ap, True)
    sub = ap.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)
    sub.add_parser("powerflow", parents=[common], help="sequential AC-DC powerflow")
    sub.add_parser("simulate", parents=[common], help="run the scenario's events")
    a = sub.add_parser("analyze", parents=[common], help="ringdown modal analysis")
    a.add_argument("--input", nargs="+", help="time-series CSV(s); default <out-dir>/timeseries.csv")
    a.add_argument("--channel", nargs="+", help="channels; the first drives mode estimation")
    a.add_argument("--t-start", type=float, help="window start (default: end of last event)")
    a.add_argument("--window", type=float, help="window length, s")
    f = sub.add_parser("freqscan", parents=[common], help="multisine scan and TF fit")
    f.add_argument("--converter")
    f.add_argument("--output", help="output channel, e.g. bus:BC:freq")
    d = sub.add_parser("design", parents=[common], help="SDC pole-placement design")
    d.add_argument("--tf", help="TF JSON from freqscan; default <out-dir>/tf.json")
    d.add_argument("--zeta-target", type=float)
    v = sub.add_parser("validate", parents=[common], help="closed-loop time-domain validation")
    v.add_argument("--params", help="SDC JSON from design; default <out-dir>/sdc_params.json")
    v.add_argument("--converter")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, seed=args.seed)
        result = VERBS[args.verb](cfg, args)
    except (ConfigError, UsageError, NetworkError, DcNetworkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
