"""Command-line surface for simulation, fitting, testing, Monte Carlo and
the data pipeline.

Exit codes: 0 on success, 2 for usage or configuration problems, 3 for
numerical failures. Every run writes a ``manifest.json`` from which the
``rerun`` command reproduces the outputs bit for bit.
"""

import argparse
import json
import pathlib
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, IacdError
from .inference import decide, format_estimates_table, report_table_row
from .likelihood import FitOptions, fit_restricted, fit_unrestricted
from .model import InnovationSpec, ParamTheta
from .montecarlo import (
    ExperimentDesign,
    PowerDesign,
    qq_data,
    run_power_study,
    run_size_study,
    write_qq_csv,
)
from .pipeline import TradeTape, acf, diurnal_adjust, durations_from_tape, fit_diurnal
from .simulate import SimConfig, read_series_csv, simulate_span, write_series_csv

_MANIFEST_SCHEMA = "iacd-run-1"


def _write_manifest(outdir, command, params):
    import numba
    import scipy

    manifest = {
        "schema_version": _MANIFEST_SCHEMA,
        "command": command,
        "params": params,
        "versions": {
            "iacd": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    with open(pathlib.Path(outdir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _outdir(params):
    out = pathlib.Path(params["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _innovation(params):
    if params["innov"] == "exp":
        return InnovationSpec.exponential()
    if params.get("nu") is None:
        raise ConfigError("--nu is required with --innov weibull")
    return InnovationSpec.weibull(params["nu"])


def cmd_simulate(params):
    out = _outdir(params)
    theta = ParamTheta(params["omega"], params["alpha"], params["beta"])
    cfg = SimConfig(
        theta0=theta,
        innov=_innovation(params),
        t_span=params["t"],
        burn_in=params["burn_in"],
        seed=params["seed"],
    )
    series = simulate_span(cfg)
    write_series_csv(series, out / "series.csv")
    _write_manifest(out, "simulate", params)
    print(f"wrote {series.n} durations to {out / 'series.csv'}", file=sys.stderr)
    return 0


def _load_series(params):
    """Series plus filter reset points when --daily-reset asked for them."""
    if not params.get("daily_reset"):
        return read_series_csv(params["infile"], params["t"]), ()
    data = np.genfromtxt(params["infile"], delimiter=",", names=True)
    if data.shape == ():
        data = data.reshape(1)
    names = data.dtype.names or ()
    if "day" not in names or "x" not in names:
        raise ConfigError("--daily-reset needs x and day columns in the input CSV")
    x = np.asarray(data["x"], dtype=float)
    day = np.asarray(data["day"])
    from .model import DurationSeries

    series = DurationSeries(x0=float(x[0]), x=x[1:], t_span=float(params["t"]))
    changes = np.nonzero(np.diff(day) != 0)[0] + 1
    resets = tuple(int(v - 1) for v in changes if v - 1 >= 1)
    return series, resets


def _fit_options(params, resets=()):
    return FitOptions(
        psi0_rule=params.get("psi0", "x0"),
        n_starts=params.get("starts", 5),
        reset_indices=resets,
    )


def cmd_fit(params):
    out = _outdir(params)
    series, resets = _load_series(params)
    options = _fit_options(params, resets)
    fit = fit_restricted(series, options) if params.get("restricted") else fit_unrestricted(series, options)
    fit.to_json(out / "fit.json", indent=2)
    _write_manifest(out, "fit", params)
    if not fit.converged:
        print("fit did not meet the convergence criteria; see fit.json diagnostics", file=sys.stderr)
        return 3
    return 0


def cmd_test(params):
    out = _outdir(params)
    series, resets = _load_series(params)
    options = _fit_options(params, resets)
    fit_u = fit_unrestricted(series, options)
    fit_r = fit_restricted(series, options)
    report = decide(fit_u, fit_r, eta=params["eta"], method=params["sigma_method"])
    report.to_json(out / "report.json", indent=2)
    _write_manifest(out, "test", params)
    row = report_table_row(report, params.get("label", "data"))
    sys.stdout.write(format_estimates_table([row], omega_scale=params["omega_scale"]))
    for name, rejected in report.decisions.items():
        verdict = "reject" if rejected else "do not reject"
        sys.stdout.write(f"{name}: {verdict} at eta={report.eta:g}\n")
    return 0


def _parse_cells(text):
    cells = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        s2, mn, a0 = part.split(",")
        cells.append((float(s2), int(float(mn)), float(a0)))
    return cells


def cmd_mc(params):
    out = _outdir(params)
    design = ExperimentDesign(
        alpha0_grid=tuple(params["alpha0"]),
        sigma2_grid=tuple(params["sigma2"]),
        median_n_targets=tuple(params["median_n"]),
        replications=params["M"],
        eta=params["eta"],
        master_seed=params["seed"],
        sigma_method=params["sigma_method"],
        pilot_reps=params["pilot_reps"],
        power=PowerDesign(grid_points=params["grid_points"]) if params["study"] == "power" else None,
    )
    if params["study"] == "size":
        cells = _parse_cells(params["cells"]) if params.get("cells") else None
        result = run_size_study(design, workers=params["workers"], cells=cells)
        result.write(out)
        for key, taus in result.tau_samples.items():
            s2, mn, a0 = key
            if taus.size >= 100:
                write_qq_csv(qq_data(taus), out / f"qq_s{s2:g}_n{mn}_a{a0:g}.csv")
    else:
        c_values = params.get("c") or None
        result = run_power_study(
            design,
            workers=params["workers"],
            median_n_targets=tuple(params["median_n"]),
            alpha0_values=tuple(params["alpha0"]),
            c_values=c_values,
        )
        result.write(out)
    _write_manifest(out, "mc", params)
    return 0


def cmd_adjust(params):
    out = _outdir(params)
    tape = TradeTape.from_csv(params["infile"], session_length=params["session_len"])
    raw = durations_from_tape(tape, tie_rule=params["tie"])
    model = fit_diurnal(raw, knot_spacing=params["knots"])
    adjusted = diurnal_adjust(raw, model)
    adjusted.write_csv(out / "adjusted.csv")
    model.to_json(out / "diurnal.json", indent=2)
    _write_manifest(out, "adjust", params)
    print(
        f"adjusted {adjusted.values.size} durations over {raw.n_days} days "
        f"(t_span {adjusted.series.t_span:g} s)",
        file=sys.stderr,
    )
    return 0


def cmd_acf(params):
    out = _outdir(params)
    series = read_series_csv(params["infile"], params.get("t") or 1e9)
    values = series.x**2 if params.get("squared") else series.x
    result = acf(values, max_lag=params["max_lag"])
    result.write_csv(out / "acf.csv")
    _write_manifest(out, "acf", params)
    return 0


def cmd_rerun(params):
    with open(params["manifest"]) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != _MANIFEST_SCHEMA:
        raise ConfigError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    saved = dict(manifest["params"])
    if params.get("out"):
        saved["out"] = params["out"]
    return _DISPATCH[manifest["command"]](saved)


_DISPATCH = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "test": cmd_test,
    "mc": cmd_mc,
    "adjust": cmd_adjust,
    "acf": cmd_acf,
}


def _build_parser():
    p = argparse.ArgumentParser(prog="iacd", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a duration series over a span")
    sim.add_argument("--omega", type=float, required=True)
    sim.add_argument("--alpha", type=float, required=True)
    sim.add_argument("--beta", type=float, required=True)
    sim.add_argument("--innov", choices=("exp", "weibull"), default="exp")
    sim.add_argument("--nu", type=float, default=None)
    sim.add_argument("--t", type=float, required=True, help="calendar span length")
    sim.add_argument("--burn-in", dest="burn_in", type=int, default=1000)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="iacd-out")

    fit = sub.add_parser("fit", help="fit the duration model to a series CSV")
    fit.add_argument("--in", dest="infile", required=True)
    fit.add_argument("--t", type=float, required=True)
    fit.add_argument("--psi0", choices=("x0", "omega"), default="x0")
    fit.add_argument("--restricted", action="store_true")
    fit.add_argument("--daily-reset", dest="daily_reset", action="store_true",
                     help="restart the filter at each new day (needs a day column)")
    fit.add_argument("--starts", type=int, default=5)
    fit.add_argument("--out", default="iacd-out")

    tst = sub.add_parser("test", help="fit both models and run the boundary tests")
    tst.add_argument("--in", dest="infile", required=True)
    tst.add_argument("--t", type=float, required=True)
    tst.add_argument("--psi0", choices=("x0", "omega"), default="x0")
    tst.add_argument("--daily-reset", dest="daily_reset", action="store_true",
                     help="restart the filter at each new day (needs a day column)")
    tst.add_argument("--starts", type=int, default=5)
    tst.add_argument("--eta", type=float, default=0.05)
    tst.add_argument("--sigma-method", dest="sigma_method", choices=("sandwich", "info"), default="sandwich")
    tst.add_argument("--omega-scale", dest="omega_scale", type=int, default=3)
    tst.add_argument("--label", default="data")
    tst.add_argument("--out", default="iacd-out")

    mc = sub.add_parser("mc", help="Monte Carlo size or power study")
    mc.add_argument("--study", choices=("size", "power"), default="size")
    mc.add_argument("--M", type=int, default=2000)
    mc.add_argument("--eta", type=float, default=0.05)
    mc.add_argument("--alpha0", type=float, nargs="+", default=[0.15, 0.5, 0.85])
    mc.add_argument("--sigma2", type=float, nargs="+", default=[1.0])
    mc.add_argument("--median-n", dest="median_n", type=int, nargs="+", default=[100])
    mc.add_argument("--cells", default=None, help='subset, e.g. "1.0,62500,0.85;1.0,12500,0.5"')
    mc.add_argument("--c", type=float, nargs="+", default=None, help="power grid offsets")
    mc.add_argument("--grid-points", dest="grid_points", type=int, default=100)
    mc.add_argument("--sigma-method", dest="sigma_method", choices=("sandwich", "info"), default="info")
    mc.add_argument("--pilot-reps", dest="pilot_reps", type=int, default=200)
    mc.add_argument("--workers", type=int, default=1)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--out", default="iacd-out")

    adj = sub.add_parser("adjust", help="diurnally adjust a trade tape")
    adj.add_argument("--in", dest="infile", required=True)
    adj.add_argument("--session-len", dest="session_len", type=float, default=23400.0)
    adj.add_argument("--knots", type=float, default=1800.0, help="knot spacing in seconds")
    adj.add_argument("--tie", choices=("collapse", "drop"), default="collapse")
    adj.add_argument("--out", default="iacd-out")

    ac = sub.add_parser("acf", help="sample autocorrelation of a series CSV")
    ac.add_argument("--in", dest="infile", required=True)
    ac.add_argument("--t", type=float, default=None)
    ac.add_argument("--max-lag", dest="max_lag", type=int, default=50)
    ac.add_argument("--squared", action="store_true")
    ac.add_argument("--out", default="iacd-out")

    rr = sub.add_parser("rerun", help="re-execute a run from its manifest")
    rr.add_argument("--manifest", required=True)
    rr.add_argument("--out", default=None)
    return p


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    params = {k: v for k, v in vars(args).items() if k != "command"}
    command = args.command
    try:
        if command == "rerun":
            return cmd_rerun(params)
        return _DISPATCH[command](params)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IacdError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
