"""Estimate and ground-truth bundles on disk.

Every float is written with ``repr`` so values round-trip exactly.  Sparse
matrices are stored as 0-based ``i,j,value`` triplets, one file per entity.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import BundleError
from .solver import LsPvarState, SolverTrace
from .synthetic import DgpSpec, GroundTruth

TRACE_COLUMNS = ("iteration", "G", "F", "primal_residual", "dw", "ds", "dphi", "dphi_c", "inner_sweeps")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_matrix(path: Path, a: np.ndarray, header=None, row_labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for k, row in enumerate(np.atleast_2d(a)):
            cells = [_fmt(v) for v in row]
            w.writerow(cells if row_labels is None else [row_labels[k], *cells])


def read_matrix(path: Path, labelled: bool = False):
    if not path.is_file():
        raise BundleError(f"missing {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise BundleError(f"{path} is empty")
    body = rows[1:]
    try:
        if labelled:
            return [r[0] for r in body], np.array([[float(v) for v in r[1:]] for r in body])
        return np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from exc


def write_sparse(path: Path, s: np.ndarray) -> None:
    i, j = np.nonzero(s)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for a, b in zip(i, j):
            w.writerow([int(a), int(b), _fmt(s[a, b])])


def read_sparse(path: Path, p: int) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"missing {path}")
    out = np.zeros((p, p))
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r][1:]
    for r in rows:
        try:
            i, j, v = int(r[0]), int(r[1]), float(r[2])
        except (ValueError, IndexError) as exc:
            raise BundleError(f"{path}: bad triplet {r}") from exc
        if not (0 <= i < p and 0 <= j < p):
            raise BundleError(f"{path}: index ({i}, {j}) outside a {p} x {p} matrix")
        out[i, j] = v
    return out


def _var_header(p: int, first: str | None = None) -> list[str]:
    cols = [f"v{k + 1}" for k in range(p)]
    return cols if first is None else [first, *cols]


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# --- estimate bundle ---------------------------------------------------------


def write_estimate(out: str | Path, state: LsPvarState, ids, trace: SolverTrace | None = None, report: dict | None = None, timings: bool = False) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    p = state.p
    written = []
    for name, mat in (("phi", state.phi), ("phi_c", state.phi_c), ("gamma", state.gamma)):
        path = out / f"{name}.csv"
        write_matrix(path, mat, _var_header(p))
        written.append(path)
    path = out / "w.csv"
    write_matrix(path, state.w, _var_header(p, "entity"), list(ids))
    written.append(path)
    for eid, s in zip(ids, state.s):
        path = out / f"s_{eid}.csv"
        write_sparse(path, s)
        written.append(path)
    if trace is not None:
        path = out / "trace.csv"
        write_trace(path, trace, timings)
        written.append(path)
    if report is not None:
        path = out / "report.json"
        write_json(path, report)
        written.append(path)
    return written


def write_trace(path: Path, trace: SolverTrace, timings: bool = False) -> None:
    cols = TRACE_COLUMNS + (("wall_time",) if timings else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerow([0, _fmt(trace.G0)] + [""] * (len(cols) - 2))
        for rec in trace.records:
            w.writerow([_fmt(getattr(rec, c)) for c in cols])


def read_estimate(directory: str | Path) -> tuple[LsPvarState, list[str]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise BundleError(f"{directory} is not a directory")
    ids, w = read_matrix(directory / "w.csv", labelled=True)
    phi = read_matrix(directory / "phi.csv")
    p = phi.shape[0]
    if phi.shape != (p, p) or w.shape[1:] != (p,):
        raise BundleError(f"inconsistent shapes: phi {phi.shape}, w {w.shape}")
    phi_c = read_matrix(directory / "phi_c.csv") if (directory / "phi_c.csv").is_file() else phi.copy()
    gamma = read_matrix(directory / "gamma.csv") if (directory / "gamma.csv").is_file() else np.zeros((p, p))
    s = np.stack([read_sparse(directory / f"s_{eid}.csv", p) for eid in ids]) if ids else np.zeros((0, p, p))
    return LsPvarState(w, s, phi, phi_c, gamma), list(ids)


# --- ground truth --------------------------------------------------------------


def write_truth(out: str | Path, truth: GroundTruth, spec: DgpSpec, ids) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    p = truth.p
    write_matrix(out / "phi.csv", truth.phi_star, _var_header(p))
    write_matrix(out / "w.csv", truth.w_star, _var_header(p, "entity"), list(ids))
    written = [out / "phi.csv", out / "w.csv"]
    for eid, s in zip(ids, truth.s_star):
        write_sparse(out / f"s_{eid}.csv", s)
        written.append(out / f"s_{eid}.csv")
    meta = {
        "M": spec.M,
        "p": spec.p,
        "r": spec.r,
        "s": spec.s,
        "T": spec.T,
        "seed": spec.seed,
        "burn_in": spec.burn_in,
        "ell_gen": spec.ell_gen,
        "sigma_prior": list(spec.sigma_prior),
        "sigma": [float(x) for x in truth.sigma],
        "ids": list(ids),
        "labels": list(truth.labels),
        "cluster_plan": [
            {"label": c.label, "members": list(c.members), "shared_w": c.shared_w, "zero_w": c.zero_w, "zero_s": c.zero_s}
            for c in spec.cluster_plan
        ],
    }
    write_json(out / "meta.json", meta)
    written.append(out / "meta.json")
    return written


def read_truth(directory: str | Path) -> tuple[GroundTruth, dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise BundleError(f"missing {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    phi = read_matrix(directory / "phi.csv")
    ids, w = read_matrix(directory / "w.csv", labelled=True)
    p = phi.shape[0]
    s = np.stack([read_sparse(directory / f"s_{eid}.csv", p) for eid in ids])
    a = w[:, :, None] * phi[None] + s
    truth = GroundTruth(phi, w, s, a, np.asarray(meta.get("sigma", [np.nan] * len(ids)), dtype=float), list(meta.get("labels", [])))
    return truth, meta
