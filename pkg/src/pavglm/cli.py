"""
Command-line pipeline: synth -> dispersion -> fit -> infer / simulate / loo -> report.

Every subcommand reads and writes plain CSV/JSON files in one output
directory, so stages can be re-run independently. All randomness comes from
``--seed`` through named sub-streams.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import inference as inf
from .basis import SplineBasis
from .dispersion import aggregate, estimate_common_rate, mean_variance_table
from .estimation import FitConfig, fit
from .io import (
    InputError,
    fmt,
    ingest,
    load_fit,
    save_fit,
    write_aggregated,
    write_csv,
    write_json,
    write_replicates,
)
from .model import Model, VarianceParams
from .response import parse_family
from .robustness import leave_one_out
from .seeding import stream
from .synth import REFERENCE_PARAMS, REFERENCE_TRUNCATIONS, R0, reference_coefficients, simulate_curves
from .warp import Warp, WarpSpec

log = logging.getLogger("pavglm")

MANIFEST_KEYS = {
    "mean_variance": "mean_variance.csv",
    "fitted_curves": "fitted_curves.csv",
    "warps": "warps.csv",
    "thresholds": "thresholds.csv",
    "confidence": "confidence.csv",
    "peaks": "peaks.csv",
    "q_table": "q_table.csv",
    "loo": "loo.csv",
}


@dataclass
class RunConfig:
    input: str = ""
    mode: str = "replicates"
    family: str = ""
    groups: str = ""
    n_basis: int = 11
    m_w: int = 7
    horizon: float = 120.0
    thresholds: str = "0.5:0.5:5.5"
    n_sim: int = 1000
    seed: int = 0
    laplace_convention: str = "standard"
    max_outer: int = 20
    workers: int = 1
    amplitude: bool = True
    out: str = "out"

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def model(self):
        return Model(SplineBasis(self.n_basis), WarpSpec(self.m_w))

    @property
    def group_list(self):
        return [g.strip() for g in self.groups.split(",") if g.strip()] or None

    @property
    def threshold_values(self):
        return parse_range(self.thresholds)

    def fit_config(self):
        return FitConfig(max_outer=self.max_outer, laplace_convention=self.laplace_convention, seed=self.seed)


HELP = {
    "input": "input CSV (curve_id,group,time_hours,count[,replicate])",
    "mode": "replicates: one row per replicate count; aggregated: one row per curve and time (default: replicates)",
    "family": "response family for aggregated input, e.g. negbin(r=18.632), poisson, gaussian(sigma2=1), binary",
    "groups": "comma-separated group names in analysis order, coldest first; other groups are rejected",
    "n_basis": "natural cubic spline knots for each group mean (default: 11, equidistant on [0, 1])",
    "m_w": "interior warp anchors (default: 7, equidistant)",
    "horizon": "hours mapped to t = 1; the end of the experiment (default: 120)",
    "thresholds": "link-scale thresholds lo:step:hi; a step of 0.5 is a 65%% change in intensity (default: 0.5:0.5:5.5)",
    "n_sim": "coefficient draws and simulated trajectories per group (default: 1000)",
    "seed": "master seed; fit, sim and synth use named sub-streams of it (default: 0)",
    "laplace_convention": "determinant curvature convention: standard (exact for Gaussian data) or paper (default: standard)",
    "max_outer": "maximum alternations between coefficient and variance-parameter updates (default: 20)",
    "workers": "processes for leave-one-out refits (default: 1)",
    "amplitude": "include amplitude variation in simulated trajectories (default: on)",
    "out": "output directory shared by all stages (default: out)",
}


def parse_range(text):
    """``lo:step:hi`` (inclusive) or a comma-separated list."""
    if ":" in text:
        lo, step, hi = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return lo + step * np.arange(n)
    return np.array([float(x) for x in text.split(",") if x.strip()])


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"{path}, line {lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(name, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind in (bool, "bool"):
        return str(value).lower() in ("1", "true", "yes", "on")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return str(value)


def build_config(args):
    values = {}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in RunConfig.__dataclass_fields__:
                raise InputError(f"{args.config}: unknown key {k!r}")
            values[k] = _coerce(k, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = _coerce(f.name, v)
    return RunConfig(**values)


# -- stages -----------------------------------------------------------------------


def _out(cfg, name):
    return Path(cfg.out) / name


def _load_run(cfg):
    path = _out(cfg, "fit.json")
    if not path.exists():
        raise InputError(f"no fitted model found in {cfg.out}")
    return load_fit(path)


def cmd_synth(cfg: RunConfig, args):
    if not args.like_paper and not args.truth:
        raise InputError("synth needs --like-paper or --truth FILE")
    model = cfg.model
    if args.truth:
        truth = json.loads(Path(args.truth).read_text())
        coeffs = {g: np.array(c) for g, c in truth["coeffs"].items()}
        vp = VarianceParams(**truth["params"])
        r0 = float(truth.get("r0", R0))
        truncations = {int(k): float(v) for k, v in truth.get("truncations", {}).items()}
        n_per_group = int(truth.get("n_per_group", 5))
    else:
        coeffs = reference_coefficients(model.basis)
        vp, r0, n_per_group = REFERENCE_PARAMS, R0, 5
        truncations = {} if args.no_truncate else REFERENCE_TRUNCATIONS
    table, truth = simulate_curves(
        coeffs, vp, r0, n_per_group=n_per_group, truncations=truncations, model=model, seed=stream(cfg.seed, "synth")
    )
    write_replicates(table, _out(cfg, "replicates.csv"))
    write_json(
        _out(cfg, "truth.json"),
        {
            "coeffs": {g: c for g, c in coeffs.items()},
            "params": vp.as_dict(),
            "r0": r0,
            "n_per_group": n_per_group,
            "truncations": {str(k): v for k, v in truncations.items()},
            "warps": truth.w,
        },
    )
    print(f"wrote {len(table)} (curve, time) cells for {len(set(table.curve_ids))} curves to {_out(cfg, 'replicates.csv')}")


def _dispersion_stage(cfg: RunConfig):
    table = ingest(cfg.input, "replicates", groups=cfg.group_list, horizon=cfg.horizon)
    mv = mean_variance_table(table)
    keep = [i for i, c in enumerate(table.counts) if c.size >= 2]
    write_csv(
        _out(cfg, "mean_variance.csv"),
        ["curve_id", "group", "time_hours", "mean", "variance"],
        [(table.curve_ids[i], table.groups[i], table.times[i], m, v) for i, (m, v) in zip(keep, mv)],
    )
    r0 = estimate_common_rate(table)
    dataset = aggregate(table, r0, cfg.horizon)
    write_aggregated(dataset, _out(cfg, "aggregated.csv"), cfg.horizon)
    write_json(
        _out(cfg, "dispersion.json"),
        {"r0": None if np.isinf(r0) else r0, "poisson": bool(np.isinf(r0)), "family": str(dataset.family)},
    )
    return table, r0, dataset


def cmd_dispersion(cfg: RunConfig, args):
    _, r0, dataset = _dispersion_stage(cfg)
    print(f"common rate r0 = {fmt(r0)}; aggregated family {dataset.family}")


def cmd_fit(cfg: RunConfig, args):
    if cfg.mode == "replicates":
        _, r0, dataset = _dispersion_stage(cfg)
    else:
        if not cfg.family:
            raise InputError("aggregated input needs --family")
        dataset = ingest(cfg.input, "aggregated", parse_family(cfg.family), cfg.group_list, cfg.horizon)
    model = cfg.model
    fitted = fit(dataset, cfg.fit_config(), model)
    save_fit(fitted, _out(cfg, "fit.json"))
    write_json(_out(cfg, "run.json"), {"input": str(cfg.input), "mode": cfg.mode, "horizon": cfg.horizon, "groups": cfg.group_list})
    grid = inf.unit_grid()
    B = model.basis.design(grid)
    rows = []
    for g, c in fitted.coeffs.items():
        theta = B @ c
        rows += [(g, h, th, np.exp(th)) for h, th in zip(grid * cfg.horizon, theta)]
    write_csv(_out(cfg, "fitted_curves.csv"), ["group", "hours", "theta", "intensity"], rows)
    rows = []
    for c, w in zip(dataset.curves, fitted.latents.w):
        warp = Warp(model.warp, w)
        for t, v in zip(grid, warp(grid)):
            rows.append((c.id, c.group, t * cfg.horizon, v * cfg.horizon))
    write_csv(_out(cfg, "warps.csv"), ["curve_id", "group", "hours", "warped_hours"], rows)
    status = "converged" if fitted.converged else "NOT converged"
    print(f"fit {status} after {fitted.iterations} iterations; params {fitted.vp.as_dict()}")
    if not fitted.converged:
        return 3


def cmd_infer(cfg: RunConfig, args):
    fitted = _load_run(cfg)
    results = []
    for g in fitted.dataset.groups:
        rng = stream(cfg.seed, "infer", g)
        results.append(inf.infer_group(fitted, g, cfg.n_sim, rng))
    rows = []
    for r in results:
        rows += [(r.group, h, e, lo, hi, se) for h, e, lo, hi, se in zip(r.band.hours, r.band.estimate, r.band.lower, r.band.upper, r.band.se)]
    write_csv(_out(cfg, "confidence.csv"), ["group", "hours", "estimate", "lower", "upper", "se"], rows)
    table = {(g, s): (lo, est, hi) for g, s, lo, est, hi in inf.peak_table(results)}
    write_csv(
        _out(cfg, "peaks.csv"),
        ["group", "location_2.5", "location_est", "location_97.5", "decrease_2.5", "decrease_est", "decrease_97.5"],
        [(r.group, *table[(r.group, "peak_location")], *table[(r.group, "peak_decrease")]) for r in results],
    )
    write_csv(_out(cfg, "q_table.csv"), ["hypothesis", "q"], inf.q_table(results))
    write_json(_out(cfg, "information.json"), {r.group: r.info for r in results})
    for r in results:
        lo, est, hi = table[(r.group, "peak_location")]
        print(f"{r.group}: peak {est:.1f} h [{lo:.1f}, {hi:.1f}]")


def cmd_simulate(cfg: RunConfig, args):
    fitted = _load_run(cfg)
    thresholds = cfg.threshold_values
    rows = []
    summary = {}
    for g in fitted.dataset.groups:
        traj = inf.simulate_trajectories(fitted, g, cfg.n_sim, stream(cfg.seed, "sim", g), cfg.amplitude, horizon=cfg.horizon)
        ts = inf.threshold_summary(traj, thresholds)
        for k in range(traj.link.shape[0]):
            for j, thr in enumerate(thresholds):
                rows.append((g, k + 1, thr, ts.first[k, j], ts.duration[k, j]))
        summary[g] = {"peak_time_sd_hours": float(np.std(traj.peak_times())), "n": int(traj.link.shape[0])}
    write_csv(_out(cfg, "thresholds.csv"), ["group", "trajectory", "threshold", "first_hours", "duration_hours"], rows)
    write_json(_out(cfg, "simulate.json"), {"amplitude": cfg.amplitude, "groups": summary})
    for g, s in summary.items():
        print(f"{g}: per-trajectory peak-time s.d. {s['peak_time_sd_hours']:.2f} h")


def cmd_loo(cfg: RunConfig, args):
    fitted = _load_run(cfg)
    run = json.loads(_out(cfg, "run.json").read_text()) if _out(cfg, "run.json").exists() else {}
    table = None
    source = cfg.input or run.get("input")
    if (run.get("mode", cfg.mode) == "replicates") and source:
        table = ingest(source, "replicates", groups=run.get("groups") or cfg.group_list)
    res = leave_one_out(
        fitted.dataset, fitted.config or cfg.fit_config(), fitted.model, fitted, table, workers=cfg.workers, horizon=cfg.horizon
    )
    names = [r[0] for r in res.rows]
    write_csv(
        _out(cfg, "loo.csv"),
        ["bound"] + names,
        [
            ("lower", *[r[1] for r in res.rows]),
            ("estimate", *[r[2] for r in res.rows]),
            ("upper", *[r[3] for r in res.rows]),
        ],
    )
    rows = []
    for g, env in res.envelopes.items():
        rows += [(g, h, e, lo, hi) for h, e, lo, hi in zip(env.hours, env.estimate, env.lower, env.upper)]
    write_csv(_out(cfg, "loo_envelope.csv"), ["group", "hours", "estimate", "lower", "upper"], rows)
    keys = list(fitted.vp.NAMES)
    write_csv(
        _out(cfg, "loo_refits.csv"),
        ["left_out", "converged", "r0"] + keys,
        [(r.left_out, str(r.converged).lower(), r.r0, *[r.params[k] for k in keys]) for r in res.refits],
    )
    if res.failed:
        print(f"refits without convergence: {', '.join(res.failed)}", file=sys.stderr)
        return 3
    print(f"{len(res.refits)} refits converged")


def cmd_report(cfg: RunConfig, args):
    fitted = _load_run(cfg)
    manifest = {"artifacts": {}, "missing": []}
    for key, name in MANIFEST_KEYS.items():
        if _out(cfg, name).exists():
            manifest["artifacts"][key] = name
        else:
            manifest["artifacts"][key] = None
            manifest["missing"].append(key)
    manifest["fit"] = {
        "family": str(fitted.dataset.family),
        "params": fitted.vp.as_dict(),
        "converged": fitted.converged,
        "objective": fitted.objective,
    }
    for extra in ("dispersion.json", "simulate.json"):
        if _out(cfg, extra).exists():
            manifest[extra.split(".")[0]] = json.loads(_out(cfg, extra).read_text())
    write_json(_out(cfg, "manifest.json"), manifest)
    print(f"manifest written to {_out(cfg, 'manifest.json')}; missing: {', '.join(manifest['missing']) or 'none'}")


COMMANDS = {
    "synth": (cmd_synth, "simulate a replicate-level dataset from a known truth"),
    "dispersion": (cmd_dispersion, "mean-variance table, common NB rate and aggregated curves"),
    "fit": (cmd_fit, "estimate group means, warps and variance parameters"),
    "infer": (cmd_infer, "information matrices, confidence bands, peak table and q-values"),
    "simulate": (cmd_simulate, "simulate trajectories and threshold crossings"),
    "loo": (cmd_loo, "leave-one-curve-out refits"),
    "report": (cmd_report, "collect all outputs into manifest.json"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="pavglm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", help="flat key = value file with any of the options below")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.name == "amplitude":
                sp.add_argument("--no-amplitude", dest="amplitude", action="store_const", const="false", help=HELP[f.name])
            else:
                sp.add_argument(flag, dest=f.name, default=None, help=HELP[f.name])
        if name == "synth":
            sp.add_argument("--like-paper", action="store_true", help="three groups x five curves, 16 samples every 8 h, NB counts")
            sp.add_argument("--truth", help="JSON with coeffs, params and optionally r0, n_per_group, truncations")
            sp.add_argument("--no-truncate", action="store_true", help="keep all time points of every curve")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        handler = COMMANDS[args.command][0]
        if args.command in ("dispersion", "fit") and not cfg.input:
            raise InputError(f"{args.command} needs --input")
        code = handler(cfg, args)
        return int(code or 0)
    except (InputError, ValueError, FileNotFoundError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
