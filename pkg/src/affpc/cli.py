"""Command-line interface: fit, predict, band, simulate, coverage.

Options resolve in three layers: built-in defaults, then a flat
``key = value`` config file given with ``--config``, then explicit
flags.  Every command writes its outputs plus a ``manifest.json``
recording the effective configuration, package and library versions,
and elapsed time, so a run can be reproduced from the manifest alone.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 model-compatibility failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import AffpcError, ConfigError
from .funcdata import load_covariate_csv, load_csv
from .inference import BootstrapConfig, prediction_bands
from .model import fit_affpc, fit_flm
from .serialize import load_fit, save_fit
from .sim import SimConfig, run_experiment

__all__ = ["main"]


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise argparse.ArgumentTypeError("expected at least one number")
    return tuple(float(p) for p in parts)


# Option table per command: name -> (type, default, help).  The config
# file uses the same names; flags win over the file, the file over the
# defaults.
_FIT_OPTIONS = {
    "model": (str, "affpc", "model to fit: affpc or flm"),
    "kx": (int, 7, "basis functions in the covariate-value direction"),
    "ks": (int, 7, "basis functions in the covariate-argument direction"),
    "degree": (int, 3, "B-spline degree"),
    "pve": (float, 0.95, "variance fraction for choosing the truncation level"),
    "lam": (_parse_pair, None, "fixed penalty levels 'lam_x,lam_s' (skips selection)"),
    "criterion": (str, "gcv", "penalty selection criterion: gcv or reml"),
    "design": (str, "auto", "sampling design: auto, dense, or sparse"),
    "grid_size": (int, 101, "working grid size on the response domain"),
    "smooth_covariates": (_parse_bool, True, "pre-smooth covariate curves"),
    "use_scalars": (_parse_bool, None, "include scalar covariates (default: when present)"),
    "n_basis_cov": (int, 10, "marginal basis size for covariance surface smoothing"),
    "k_max": (int, None, "cap on the number of response components"),
}

_BAND_OPTIONS = {
    "n_boot": (int, 100, "bootstrap replicates"),
    "alpha": (_parse_floats, (0.05,), "band levels, comma separated"),
    "seed": (int, 0, "bootstrap seed"),
    "workers": (int, 1, "parallel workers for the bootstrap"),
    "error_cov_mode": (str, "single", "noise variance source: single or bootstrap_mean"),
    "grid_size": (int, None, "number of output time points (default: model grid)"),
}

_SIM_OPTIONS = {
    "kernel": (str, "F1", "true kernel: F1, F2, or F3"),
    "error": (str, "E1", "error process: E1..E4"),
    "design": (str, "dense", "sampling design: dense or sparse"),
    "n": (int, 100, "training subjects per replicate"),
    "n_test": (int, 50, "test subjects per replicate"),
    "n_mc": (int, 100, "Monte Carlo replicates"),
    "seed": (int, 1, "root seed"),
    "pve": (float, 0.95, "variance fraction for the truncation level"),
    "kx": (int, 7, "covariate-value basis size"),
    "ks": (int, 7, "covariate-argument basis size"),
    "criterion": (str, "reml", "penalty selection criterion"),
    "smooth_covariates": (_parse_bool, True, "pre-smooth covariate curves"),
    "workers": (int, 1, "parallel workers over replicates"),
    "n_boot": (int, 100, "bootstrap replicates per Monte Carlo replicate (coverage)"),
    "alpha": (_parse_floats, (0.05, 0.10), "band levels (coverage)"),
}


def _add_options(parser: argparse.ArgumentParser, table: dict) -> None:
    for name, (type_, _default, help_) in table.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=type_,
                            default=None, help=help_)


def _read_config_file(path: str) -> dict:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key] = value
    return values


def _resolve(args: argparse.Namespace, table: dict) -> dict:
    """Merge flag > config file > default for every option in the table."""
    from_file_raw = _read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(from_file_raw) - set(table)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for name, (type_, default, _help) in table.items():
        flag_value = getattr(args, name)
        if flag_value is not None:
            resolved[name] = flag_value
        elif name in from_file_raw:
            try:
                resolved[name] = type_(from_file_raw[name])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"config key {name}: {exc}") from None
        else:
            resolved[name] = default
    return resolved


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _write_manifest(out_dir: Path, command: str, config: dict, outputs: list[str],
                    started: str, tic: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: _jsonable(v) for k, v in config.items()},
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "started": started,
        "finished": _now(),
        "elapsed_seconds": time.perf_counter() - tic,
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=2)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ---------------------------------------------------------------


def _cmd_fit(args) -> int:
    started, tic = _now(), time.perf_counter()
    config = _resolve(args, _FIT_OPTIONS)
    if config["model"] not in ("affpc", "flm"):
        raise ConfigError(f"model must be 'affpc' or 'flm', got {config['model']!r}")
    if config["criterion"] not in ("gcv", "reml"):
        raise ConfigError(f"criterion must be 'gcv' or 'reml', got {config['criterion']!r}")
    if config["design"] not in ("auto", "dense", "sparse"):
        raise ConfigError(f"design must be auto, dense, or sparse, got {config['design']!r}")
    dataset = load_csv(args.train)
    out = _out_dir(args)
    shared = dict(
        degree=config["degree"], pve=config["pve"], criterion=config["criterion"],
        design=config["design"], grid_size=config["grid_size"],
        smooth_covariates=config["smooth_covariates"], use_scalars=config["use_scalars"],
        n_basis_cov=config["n_basis_cov"], k_max=config["k_max"],
    )
    if config["model"] == "flm":
        fit = fit_flm(dataset, ks=config["ks"],
                      lam_s=None if config["lam"] is None else config["lam"][1], **shared)
    else:
        fit = fit_affpc(dataset, kx=config["kx"], ks=config["ks"], lam=config["lam"], **shared)
    outputs = ["model.json"]
    save_fit(fit, out / "model.json")
    if fit.lambda_info is not None:
        with open(out / "lambda_trace.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["lam_x", "lam_s", "score", "edf"])
            writer.writerows(fit.lambda_info.trace.tolist())
        outputs.append("lambda_trace.csv")
    summary = {
        "model": fit.model, "n_subjects": fit.n_subjects, "design": fit.design,
        "n_components": fit.n_components, "lam": list(fit.lam),
        "pve": fit.eigenbasis.pve, "solve_method": fit.solve_method,
    }
    with open(out / "fit_summary.json", "w") as handle:
        json.dump(summary, handle, indent=2)
    outputs.append("fit_summary.json")
    _write_manifest(out, "fit", config, outputs, started, tic)
    print(f"fitted {fit.model}: n={fit.n_subjects}, K={fit.n_components}, "
          f"lambda=({fit.lam[0]:.4g}, {fit.lam[1]:.4g}) -> {out / 'model.json'}")
    return 0


def _cmd_predict(args) -> int:
    started, tic = _now(), time.perf_counter()
    fit = load_fit(args.model)
    curves, _names = load_covariate_csv(args.data)
    out = _out_dir(args)
    if args.grid_size is not None:
        lo, hi = fit.response_domain
        t_grid = np.linspace(lo, hi, args.grid_size)
    else:
        t_grid = fit.eigenbasis.grid
    with open(out / "predictions.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["subject_id", "t", "y_hat"])
        for curve in curves:
            y_hat = fit.predict(curve, t_grid)
            for t, y in zip(t_grid, y_hat):
                writer.writerow([curve.subject_id, repr(float(t)), repr(float(y))])
    config = {"model": str(args.model), "data": str(args.data),
              "grid_size": args.grid_size}
    _write_manifest(out, "predict", config, ["predictions.csv"], started, tic)
    print(f"predicted {len(curves)} curves at {t_grid.size} points -> "
          f"{out / 'predictions.csv'}")
    return 0


_BAND_COLUMNS = ["t", "y_hat", "se_total", "lower", "upper",
                 "var_model", "var_eigen", "var_noise"]


def _cmd_band(args) -> int:
    started, tic = _now(), time.perf_counter()
    config = _resolve(args, _BAND_OPTIONS)
    if config["error_cov_mode"] not in ("single", "bootstrap_mean"):
        raise ConfigError("error_cov_mode must be 'single' or 'bootstrap_mean'")
    for alpha in config["alpha"]:
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must be strictly between 0 and 1, got {alpha}")
    base_fit = load_fit(args.model)
    dataset = load_csv(args.train)
    curves, _names = load_covariate_csv(args.data)
    out = _out_dir(args)
    if config["grid_size"] is not None:
        lo, hi = base_fit.response_domain
        t_grid = np.linspace(lo, hi, config["grid_size"])
    else:
        t_grid = base_fit.eigenbasis.grid
    fit_kwargs = dict(pve=base_fit.eigenbasis.pve, design=base_fit.design,
                      smooth_covariates=base_fit.smooth_covariates)
    if base_fit.model == "affpc":
        fit_kwargs["kx"] = base_fit.basis_x.n_basis
        fit_kwargs["ks"] = base_fit.basis_s.n_basis
    else:
        fit_kwargs["ks"] = base_fit.basis_s.n_basis
    boot_config = BootstrapConfig(
        n_boot=config["n_boot"], seed=config["seed"], workers=config["workers"],
        model=base_fit.model, error_cov_mode=config["error_cov_mode"],
        fit_kwargs=fit_kwargs,
    )
    _, boot, bands = prediction_bands(dataset, curves, config=boot_config,
                                      base_fit=base_fit, alphas=config["alpha"],
                                      t_grid=t_grid)
    outputs = []
    for alpha, band_list in bands.items():
        tag = f"{int(round(100 * (1 - alpha)))}"
        for curve, band in zip(curves, band_list):
            name = f"band_{curve.subject_id or 'subject'}_{tag}.csv"
            with open(out / name, "w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(_BAND_COLUMNS)
                for row in band.rows():
                    writer.writerow([repr(float(v)) for v in row])
            outputs.append(name)
    config_out = dict(config)
    config_out.update(model=str(args.model), train=str(args.train), data=str(args.data))
    _write_manifest(out, "band", config_out, outputs, started, tic)
    print(f"bands for {len(curves)} curves at levels "
          f"{sorted(bands)} ({boot.n_redraws} bootstrap redraws) -> {out}")
    return 0


def _sim_config(config: dict, coverage: bool) -> SimConfig:
    try:
        return SimConfig(
            kernel=config["kernel"], error=config["error"], design=config["design"],
            n=config["n"], n_test=config["n_test"], n_mc=config["n_mc"],
            seed=config["seed"], pve=config["pve"], kx=config["kx"], ks=config["ks"],
            criterion=config["criterion"], smooth_covariates=config["smooth_covariates"],
            coverage=coverage, n_boot=config["n_boot"], alphas=tuple(config["alpha"]),
            workers=config["workers"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_replicates_csv(path: Path, report) -> None:
    keys = ["rmspe_affpc_in", "rmspe_flm_in", "rmspe_affpc_out", "rmspe_flm_out",
            "n_components", "lam_x", "lam_s", "seconds_fit"]
    alphas = list(report.config.alphas) if report.config.coverage else []
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["replicate"] + keys + [f"coverage_{a}" for a in alphas])
        for i, rep in enumerate(report.replicates):
            row = [i] + [rep[k] for k in keys]
            row += [rep["coverage"][a] for a in alphas]
            writer.writerow(row)


def _run_sim(args, coverage: bool) -> int:
    started, tic = _now(), time.perf_counter()
    config = _resolve(args, _SIM_OPTIONS)
    sim_config = _sim_config(config, coverage)
    report = run_experiment(sim_config)
    out = _out_dir(args)
    outputs = ["report.json", "replicates.csv"]
    with open(out / "report.json", "w") as handle:
        json.dump(report.to_dict(), handle, indent=2)
    _write_replicates_csv(out / "replicates.csv", report)
    if coverage:
        with open(out / "coverage_per_t.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            grid = np.linspace(0.0, 1.0, len(next(iter(report.coverage_per_t.values()))))
            writer.writerow(["t"] + [f"coverage_{a}" for a in report.coverage_per_t])
            profiles = list(report.coverage_per_t.values())
            for j, t in enumerate(grid):
                writer.writerow([repr(float(t))] + [repr(float(p[j])) for p in profiles])
        outputs.append("coverage_per_t.csv")
    _write_manifest(out, "coverage" if coverage else "simulate", config, outputs,
                    started, tic)
    line = (f"{report.n_completed}/{sim_config.n_mc} replicates, "
            f"out-of-sample rmspe affpc={report.rmspe['affpc_out']:.4f} "
            f"flm={report.rmspe['flm_out']:.4f} gain={report.gain_out:.1f}%")
    if coverage:
        rates = ", ".join(f"{1 - a:.0%}: {report.coverage[a]:.3f}" for a in sorted(report.coverage))
        line += f", coverage {rates}"
    print(line + f" -> {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affpc",
        description="Additive function-on-function regression with "
                    "principal-component response expansion.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model from a long-format CSV")
    p_fit.add_argument("--train", required=True, help="training data CSV")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--config", help="flat 'key = value' config file")
    _add_options(p_fit, _FIT_OPTIONS)
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict", help="predict response curves for new covariates")
    p_pred.add_argument("--model", required=True, help="model.json from 'fit'")
    p_pred.add_argument("--data", required=True, help="new covariate curves CSV")
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.add_argument("--grid-size", dest="grid_size", type=int, default=None,
                        help="number of output time points (default: model grid)")
    p_pred.set_defaults(func=_cmd_predict)

    p_band = sub.add_parser("band", help="bootstrap prediction bands for new covariates")
    p_band.add_argument("--model", required=True, help="model.json from 'fit'")
    p_band.add_argument("--train", required=True, help="training data CSV (resampled)")
    p_band.add_argument("--data", required=True, help="new covariate curves CSV")
    p_band.add_argument("--out", required=True, help="output directory")
    p_band.add_argument("--config", help="flat 'key = value' config file")
    _add_options(p_band, _BAND_OPTIONS)
    p_band.set_defaults(func=_cmd_band)

    p_sim = sub.add_parser("simulate", help="Monte Carlo prediction-accuracy experiment")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--config", help="flat 'key = value' config file")
    _add_options(p_sim, _SIM_OPTIONS)
    p_sim.set_defaults(func=lambda a: _run_sim(a, coverage=False))

    p_cov = sub.add_parser("coverage", help="Monte Carlo band-coverage experiment")
    p_cov.add_argument("--out", required=True, help="output directory")
    p_cov.add_argument("--config", help="flat 'key = value' config file")
    _add_options(p_cov, _SIM_OPTIONS)
    p_cov.set_defaults(func=lambda a: _run_sim(a, coverage=True))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AffpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
