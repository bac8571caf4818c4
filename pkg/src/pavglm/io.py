"""
CSV ingestion and emission, and JSON persistence of fitted models.

Input files have the header ``curve_id,group,time_hours,count`` with an
optional trailing ``replicate`` column (required for replicate-level data).
"""

import csv
import json
from pathlib import Path

import numpy as np

from .basis import SplineBasis
from .dispersion import ReplicateTable
from .estimation import FitConfig, FittedModel
from .model import Curve, Dataset, LatentState, Model, VarianceParams
from .response import parse_family
from .warp import WarpSpec

BASE_COLUMNS = ["curve_id", "group", "time_hours", "count"]


class InputError(ValueError):
    """Malformed input file; the message names the offending line."""


def fmt(x):
    """Deterministic text form of a number (integers without a decimal point)."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.12g}"


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def _read_records(path, need_replicate):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: no rows") from None
        expected = BASE_COLUMNS + (["replicate"] if need_replicate else [])
        if header[:4] != BASE_COLUMNS or len(header) > 5 or (len(header) == 5 and header[4] != "replicate"):
            raise InputError(f"{path}: header must be {','.join(BASE_COLUMNS)}[,replicate], got {','.join(header)}")
        if need_replicate and header != expected:
            raise InputError(f"{path}: replicate column required for replicate-level input")
        has_rep = len(header) == 5
        records = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            cid, group = row[0].strip(), row[1].strip()
            try:
                t = float(row[2])
                count = float(row[3])
                rep = int(row[4]) if has_rep else 1
            except ValueError:
                raise InputError(f"{path}, line {line}: non-numeric time, count or replicate") from None
            if not np.isfinite(t) or t < 0:
                raise InputError(f"{path}, line {line}: time must be finite and nonnegative")
            if count < 0:
                raise InputError(f"{path}, line {line}: negative count {row[3].strip()}")
            records.append((line, cid, group, t, count, rep))
    if not records:
        raise InputError(f"{path}: no rows")
    return records


def _check_records(path, records, groups):
    seen = {}
    for line, cid, group, t, _, rep in records:
        if groups is not None and group not in groups:
            raise InputError(f"{path}, line {line}: unknown group {group!r}")
        key = (cid, t, rep)
        if key in seen:
            raise InputError(f"{path}, line {line}: duplicate (curve, time, replicate) key, first seen on line {seen[key]}")
        seen[key] = line
    by_curve = {}
    for line, cid, group, *_ in records:
        first = by_curve.setdefault(cid, (group, line))
        if first[0] != group:
            raise InputError(f"{path}, line {line}: curve {cid} listed under groups {first[0]!r} and {group!r}")


def read_replicates(path, groups=None):
    """Replicate-level CSV to a :class:`ReplicateTable` (one row per curve and time)."""
    records = _read_records(path, need_replicate=True)
    _check_records(path, records, groups)
    cells = {}
    order = []
    for line, cid, group, t, count, rep in records:
        key = (cid, t)
        if key not in cells:
            cells[key] = (group, {})
            order.append(key)
        if count != round(count):
            raise InputError(f"{path}, line {line}: counts must be integers")
        cells[key][1][rep] = count
    rows = []
    for cid, t in order:
        group, reps = cells[(cid, t)]
        rows.append((cid, group, t, np.array([reps[k] for k in sorted(reps)])))
    group_order = list(groups) if groups is not None else list(dict.fromkeys(r[1] for r in rows))
    return ReplicateTable.from_rows(rows, group_order)


def read_aggregated(path, family, groups=None, horizon=120.0):
    """Curve-level CSV (one observation per curve and time) to a :class:`Dataset`."""
    records = _read_records(path, need_replicate=False)
    _check_records(path, records, groups)
    by_curve = {}
    for _, cid, group, t, count, _ in records:
        by_curve.setdefault(cid, (group, []))[1].append((t, count))
    curves = []
    for cid, (group, obs) in by_curve.items():
        obs.sort()
        curves.append(Curve(cid, group, np.array([o[0] for o in obs]) / horizon, np.array([o[1] for o in obs]), 1, family))
    group_order = list(groups) if groups is not None else list(dict.fromkeys(c.group for c in curves))
    return Dataset(curves, family, group_order)


def ingest(path, mode="replicates", family=None, groups=None, horizon=120.0):
    if mode == "replicates":
        return read_replicates(path, groups)
    if mode == "aggregated":
        if family is None:
            raise ValueError("aggregated input needs a response family")
        return read_aggregated(path, family, groups, horizon)
    raise ValueError("mode must be 'replicates' or 'aggregated'")


def write_replicates(table: ReplicateTable, path):
    rows = []
    for cid, g, t, c in zip(table.curve_ids, table.groups, table.times, table.counts):
        for k, v in enumerate(c, start=1):
            rows.append((cid, g, t, int(v), k))
    return write_csv(path, BASE_COLUMNS + ["replicate"], rows)


def write_aggregated(dataset: Dataset, path, horizon=120.0):
    rows = []
    for c in dataset.curves:
        for t, y in zip(c.times, c.y):
            rows.append((c.id, c.group, t * horizon, y))
    return write_csv(path, BASE_COLUMNS, rows)


# -- fitted model persistence ---------------------------------------------------


def _config_dict(cfg: FitConfig):
    out = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    out["initial"] = cfg.initial.as_dict()
    out["fixed"] = list(cfg.fixed)
    return out


def fit_to_dict(fitted: FittedModel):
    ds = fitted.dataset
    return {
        "family": str(ds.family),
        "groups": list(ds.groups),
        "n_basis": fitted.model.basis.n_basis,
        "m_w": fitted.model.warp.m_w,
        "curves": [
            {
                "id": c.id,
                "group": c.group,
                "times": c.times.tolist(),
                "y": c.y.tolist(),
                "replicate_count": c.replicate_count,
                "family": str(c.family),
            }
            for c in ds.curves
        ],
        "coeffs": {g: np.asarray(v).tolist() for g, v in fitted.coeffs.items()},
        "params": fitted.vp.as_dict(),
        "latents": {"u": [np.asarray(u).tolist() for u in fitted.latents.u], "w": [np.asarray(w).tolist() for w in fitted.latents.w]},
        "objective": fitted.objective,
        "posterior": fitted.posterior,
        "converged": fitted.converged,
        "iterations": fitted.iterations,
        "trace": [float(v) for v in fitted.trace],
        "kkt": fitted.kkt,
        "config": _config_dict(fitted.config) if fitted.config is not None else None,
    }


def fit_from_dict(d):
    curves = [Curve(c["id"], c["group"], c["times"], c["y"], c["replicate_count"], parse_family(c["family"])) for c in d["curves"]]
    ds = Dataset(curves, parse_family(d["family"]), d["groups"])
    model = Model(SplineBasis(d["n_basis"]), WarpSpec(d["m_w"]))
    cfg = None
    if d.get("config"):
        c = dict(d["config"])
        c["initial"] = VarianceParams(**c["initial"])
        c["fixed"] = tuple(c["fixed"])
        cfg = FitConfig(**c)
    latents = LatentState([np.array(u) for u in d["latents"]["u"]], [np.array(w) for w in d["latents"]["w"]])
    return FittedModel(
        ds,
        model,
        {g: np.array(v) for g, v in d["coeffs"].items()},
        VarianceParams(**d["params"]),
        latents,
        d["objective"],
        d["posterior"],
        d["converged"],
        d["iterations"],
        d["trace"],
        d["kkt"],
        cfg,
    )


def save_fit(fitted: FittedModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(fit_to_dict(fitted), indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def load_fit(path) -> FittedModel:
    return fit_from_dict(json.loads(Path(path).read_text()))


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")
