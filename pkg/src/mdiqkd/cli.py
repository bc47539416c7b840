"""Command-line front end: simulate, optimize, arts, prts, sweep, probe.

Exit codes: 0 success, 1 model failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .channel import discretize
from .config import ConfigError, ExperimentConfig, load_config, party_section, resolved_ini
from .detection import ModelError, pooled_counts
from .channel import truncate_above
from .finite_key import NoKeyError, NoStatisticsError, check_bound_validity
from .optimizer import (
    OptimizationError, OptimizationProblem, fitness, optimize, params_vector,
)
from .params import ParameterError, db_to_transmittance
from .postselection import (
    ChannelRangeError, ThresholdPair, arts_scan, key_rate_at_thresholds, loss_sweep,
    prts_threshold, table1_params_for_loss,
)
from . import probe as probe_mod

logger = logging.getLogger("mdiqkd")

EXIT_OK, EXIT_MODEL, EXIT_CONFIG = 0, 1, 2


class OutputDir:
    """Output directory that records every file it writes with its columns."""

    def __init__(self, path, command: str, cfg: ExperimentConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}
        self.command = command
        self.cfg = cfg
        (self.path / "resolved_config.ini").write_text(resolved_ini(cfg))
        self.files["resolved_config.ini"] = "INI; fully resolved configuration"

    def file(self, name: str, schema: str) -> Path:
        self.files[name] = schema
        return self.path / name

    def write_json(self, name: str, data: dict, schema: str = "JSON object") -> None:
        with open(self.file(name, schema), "w") as fh:
            json.dump(data, fh, indent=2, default=_json_default)

    def close(self) -> None:
        manifest = {"tool": "mdiqkd", "version": __version__, "command": self.command,
                    "seed": self.cfg.seed, "config_source": self.cfg.source,
                    "files": self.files}
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _check_bounds(cfg: ExperimentConfig) -> None:
    """Abort when the selected decoy bound is not a valid bound of the detection model."""
    bad = check_bound_validity(cfg.alice, cfg.bob, cfg.dev, cfg.form, cfg.convention)
    if bad:
        first = bad[0]
        raise ModelError(
            f"decoy bound form '{cfg.form}' (convention '{cfg.convention}') fails the "
            f"exact single-photon check at {len(bad)} points, e.g. {first.quantity} at "
            f"eta=({first.eta_a:.3g}, {first.eta_b:.3g}): bound {first.bound:.4g} vs "
            f"true {first.truth:.4g}")


def _problem(cfg: ExperimentConfig, loss_a_db=None, loss_b_db=None) -> OptimizationProblem:
    eta_a = cfg.spec_a.eta0 if loss_a_db is None else db_to_transmittance(loss_a_db)
    eta_b = cfg.spec_b.eta0 if loss_b_db is None else db_to_transmittance(loss_b_db)
    return OptimizationProblem(eta_a, eta_b, cfg.dev, cfg.omega, cfg.fitness_mode,
                               cfg.bounds, cfg.spec_a.sigma2, cfg.spec_b.sigma2,
                               form=cfg.form)


def _ensure_params(cfg: ExperimentConfig) -> ExperimentConfig:
    if not cfg.needs_optimization:
        return cfg
    logger.info("optimizing intensities before the run")
    res = optimize(_problem(cfg), cfg.ga)
    return cfg.with_params(res.alice, res.bob)


def _distributions(cfg):
    return discretize(cfg.spec_a, cfg.n_bins), discretize(cfg.spec_b, cfg.n_bins)


# --- commands -------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    cfg = _ensure_params(cfg)
    _check_bounds(cfg)
    da, db = _distributions(cfg)
    th = ThresholdPair(cfg.eta_th_a, cfg.eta_th_b)
    res = key_rate_at_thresholds(th, cfg.alice, cfg.bob, da, db, cfg.dev, cfg.form,
                                 cfg.convention)
    per_pulse = res.secret_bits / cfg.dev.n_pulses
    summary = res.to_dict() | {"rate_per_transmitted_pulse": per_pulse,
                               "eta_th_a": th.eta_th_a, "eta_th_b": th.eta_th_b}
    out.write_json("result.json", summary, "KeyRateResult fields plus rate per transmitted pulse")
    with open(out.file("result.csv", ",".join(res.CSV_FIELDS)), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(res.CSV_FIELDS)
        w.writerow(res.csv_row())
    ka, _ = truncate_above(da, th.eta_th_a)
    kb, _ = truncate_above(db, th.eta_th_b)
    pooled_counts(cfg.alice, cfg.bob, ka, kb, cfg.dev).to_csv(
        out.file("counts.csv", "label,n,m; first row n_effective"))
    print(f"rate per transmitted pulse: {per_pulse:.6g}  (Y11_L={res.y11_low:.4g}, "
          f"e11_U={res.e11_up:.4g}, E_zz={res.e_zz:.4g}) {res.reason}")
    if cfg.require_positive and per_pulse <= 0:
        logger.error("configuration requires a positive rate; got 0 (%s)", res.reason)
        return EXIT_MODEL
    return EXIT_OK


def cmd_optimize(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    problem = _problem(cfg)
    res = optimize(problem, cfg.ga)
    res.to_csv(out.file("convergence.csv", "generation,best_rate,mean_rate"))
    with open(out.file("params.ini", "INI fragment with [alice] and [bob]"), "w") as fh:
        import configparser
        cp = configparser.ConfigParser()
        cp["alice"] = party_section(res.alice)
        cp["bob"] = party_section(res.bob)
        cp.write(fh)
    report = {"best_rate": res.best_rate, "alice": res.alice.to_dict(),
              "bob": res.bob.to_dict(), "evaluations": res.evaluations}
    if not cfg.needs_optimization:
        report["config_params_rate"] = fitness(params_vector(cfg.alice, cfg.bob), problem)
    out.write_json("optimize.json", report)
    print(f"best rate {res.best_rate:.6g}")
    print(f"  alice {res.alice.as_vector().round(5).tolist()}")
    print(f"  bob   {res.bob.as_vector().round(5).tolist()}")
    if "config_params_rate" in report:
        print(f"  rate at configured parameters {report['config_params_rate']:.6g}")
    return EXIT_OK


def cmd_arts(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    cfg = _ensure_params(cfg)
    _check_bounds(cfg)
    da, db = _distributions(cfg)
    surface = arts_scan(cfg.alice, cfg.bob, da, db, cfg.dev, form=cfg.form,
                        convention=cfg.convention)
    surface.to_csv(out.file("surface.csv", "eta_th_a,eta_th_b,log10_rate,zero_rate"))
    th = surface.argmax
    out.write_json("arts.json", {"eta_th_a": th.eta_th_a, "eta_th_b": th.eta_th_b,
                                 "max_rate": surface.max_rate,
                                 "no_rejection_rate": surface.no_rejection_rate})
    print(f"ARTS argmax ({th.eta_th_a:.4g}, {th.eta_th_b:.4g}) rate {surface.max_rate:.6g}; "
          f"no rejection {surface.no_rejection_rate:.6g}")
    return EXIT_OK


def cmd_prts(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    cfg = _ensure_params(cfg)
    _check_bounds(cfg)
    res = prts_threshold(cfg.alice, cfg.bob, cfg.spec_a, cfg.spec_b, cfg.dev, cfg.n_bins,
                         form=cfg.form, convention=cfg.convention)
    out.write_json("prts.json", {
        "eta_th_a": res.threshold.eta_th_a, "eta_th_b": res.threshold.eta_th_b,
        "rate": res.rate, "no_rejection_rate": res.no_rejection_rate,
        "refined_eta_th_a": res.refined.eta_th_a, "refined_eta_th_b": res.refined.eta_th_b,
        "refined_rate": res.refined_rate})
    print(f"P-RTS threshold ({res.threshold.eta_th_a:.4g}, {res.threshold.eta_th_b:.4g}) "
          f"predicted rate {res.rate:.6g}")
    print(f"  refined ({res.refined.eta_th_a:.4g}, {res.refined.eta_th_b:.4g}) "
          f"rate {res.refined_rate:.6g}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    s = cfg.sweep
    losses = np.linspace(s.loss_min_db, s.loss_max_db, s.points)
    if s.intensities == "fixed":
        cfg = _ensure_params(cfg)
        _check_bounds(cfg)
        params = lambda la, lb: (cfg.alice, cfg.bob)
    elif s.intensities == "table1":
        params = table1_params_for_loss
    else:
        def params(la, lb):
            r = optimize(_problem(cfg, la, lb), cfg.ga)
            return r.alice, r.bob
    res = loss_sweep(params, cfg.dev, losses, cfg.loss_a_db, cfg.spec_a.sigma2,
                     cfg.spec_b.sigma2, cfg.n_bins, cfg.form, cfg.convention)
    res.to_csv(out.file("sweep.csv", "loss_db,loss_a_db,loss_b_db,rate_static,rate_prts,"
                                     "eta_th_a,eta_th_b"))
    summary = {"max_loss_static_db": res.max_loss_static, "max_loss_prts_db": res.max_loss_prts,
               "extension_db": res.extension_db}
    out.write_json("sweep.json", summary)
    print(f"{'loss_db':>8} {'static':>12} {'P-RTS':>12}")
    for p in res.points:
        print(f"{p.loss_db:8.2f} {p.rate_static:12.4g} {p.rate_prts:12.4g}")
    print(f"max tolerable loss: static {summary['max_loss_static_db']}, "
          f"P-RTS {summary['max_loss_prts_db']}")
    return EXIT_OK


def cmd_probe(cfg: ExperimentConfig, out: OutputDir, args) -> int:
    ps = cfg.probe
    series_schema = "frame,eta,area,method,out_of_range,no_pulse"
    if ps.frames_dir is None:
        rep = probe_mod.closed_loop(cfg.seed, ps.method, ps.snr, ps.degree,
                                    ps.reference_levels, ps.frames_per_level,
                                    test_frames_per_level=ps.test_frames_per_level,
                                    n_samples=ps.n_samples, dt=ps.dt, fwhm=ps.fwhm,
                                    workers=args.threads)
        rep.calibration.to_json(out.file("calibration.json", "CalibrationCurve"))
        with open(out.file("series.csv", "frame,programmed_eta,eta"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "programmed_eta", "eta"])
            for k, (p, e) in enumerate(zip(rep.programmed, rep.estimates)):
                w.writerow([k, p, repr(float(e))])
        summary = rep.summary()
        out.write_json("probe_report.json", summary)
        print(f"synthetic closed loop ({ps.method}): median abs error "
              f"{summary['median_abs_error']:.4g}, median rel error "
              f"{summary['median_rel_error']:.4g}")
        return EXIT_OK

    frames_dir = Path(ps.frames_dir)
    paths = sorted(p for p in frames_dir.glob("*") if p.suffix in (".csv", ".bin")) \
        if frames_dir.is_dir() else []
    if not paths:
        raise probe_mod.ProbeError(f"no frames found in {frames_dir}")
    if ps.calibration:
        cal = probe_mod.CalibrationCurve.from_json(ps.calibration)
    elif ps.references:
        cal = _calibration_from_references(Path(ps.references), ps.method, ps.degree)
    else:
        raise ConfigError("[probe] needs 'calibration' or 'references' for measured frames")
    cal.to_json(out.file("calibration.json", "CalibrationCurve"))
    frames, names, corrupt = [], [], 0
    for p in paths:
        try:
            frames.append(probe_mod.read_frame(p))
            names.append(p.name)
        except (probe_mod.ProbeError, OSError, ValueError) as exc:
            corrupt += 1
            logger.warning("skipping unreadable frame %s: %s", p.name, exc)
    est = probe_mod.estimate_series(frames, cal, ps.method, args.threads)
    with open(out.file("series.csv", series_schema), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(series_schema.split(","))
        for name, e in zip(names, est):
            w.writerow([name, repr(e.eta), repr(e.area), e.method, int(e.out_of_range),
                        int(e.no_pulse)])
    out.write_json("probe_report.json", {"frames": len(paths), "processed": len(frames),
                                         "corrupt": corrupt})
    print(f"{len(frames)} frames processed, {corrupt} corrupt frames skipped")
    return EXIT_OK


def _calibration_from_references(path: Path, method: str, degree: int):
    """Reference CSV rows: frame file (relative to the CSV), programmed transmittance."""
    by_eta: dict[float, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                frame = probe_mod.read_frame(path.parent / row["file"])
            except (probe_mod.ProbeError, OSError) as exc:
                logger.warning("skipping reference %s: %s", row.get("file"), exc)
                continue
            by_eta.setdefault(float(row["eta"]), []).append(frame)
    return probe_mod.fit_calibration(probe_mod.calibration_pairs(by_eta, method), degree)


COMMANDS = {
    "simulate": (cmd_simulate, "key rate at the configured cutoffs"),
    "optimize": (cmd_optimize, "genetic-algorithm intensity optimization"),
    "arts": (cmd_arts, "exhaustive cutoff scan of the model"),
    "prts": (cmd_prts, "prefixed cutoffs from channel statistics"),
    "sweep": (cmd_sweep, "static and P-RTS rate versus total loss"),
    "probe": (cmd_probe, "probe-pulse calibration and transmittance series"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdiqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True,
                       help="INI file, or a bundled name: 30db, 33db")
        p.add_argument("--out", default=None, help="output directory (default out/<command>)")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for probe frames")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = OutputDir(args.out or Path("out") / args.command, args.command, cfg)
        try:
            return func(cfg, out, args)
        finally:
            out.close()
    except (ConfigError, OptimizationError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChannelRangeError, ModelError, NoStatisticsError, NoKeyError,
            probe_mod.ProbeError, probe_mod.FitError) as exc:
        print(f"model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
