"""Command-line entry point: ``lspvar simulate | fit | tune | diagnose``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bundle
from .diagnostics import compute_metrics, incoherence, pca_weights, stability_report
from .errors import LspvarError
from .panel import build_panel, read_panel, write_panel_dir
from .solver import SolverConfig, fit, init_random, init_spectral
from .synthetic import DgpSpec, generate, preset
from .tuning import bic, default_eta_grid, grid_search_eta, parse_grid, write_bic_path

log = logging.getLogger("lspvar")

# keys allowed in a --config file, mapped to their argparse destinations
CONFIG_KEYS = {
    "panel", "seed", "rank", "ell", "rho", "eta", "eta_grid", "eps", "max_iter", "init", "threads",
    "preset", "metrics", "pca", "M", "p", "r", "s", "T", "burn_in", "record_timings", "estimate",
}  # fmt: skip
NOT_ECHOED = {"out", "config", "func", "command"}


def read_config(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{n}: unknown key {key!r}")
            out[key] = value
    return out


def _auto_float(text):
    if text is None or str(text).lower() == "auto":
        return None
    return float(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _add_solver_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", help="directory of per-entity CSVs or a long-format CSV")
    p.add_argument("--rank", type=int, help="maximum rank of the basis (default p // 2)")
    p.add_argument("--ell", default="auto", help="nuclear norm of the basis, or auto = sqrt(rank * p)")
    p.add_argument("--rho", default="auto", help="ADMM step size, or auto = M / 10")
    p.add_argument("--eta", type=float, help="single l1 penalty")
    p.add_argument("--eta-grid", dest="eta_grid", help="geometric grid MIN:MAX:N searched by BIC")
    p.add_argument("--eps", type=float, default=5e-6)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=400_000)
    p.add_argument("--init", choices=("random", "spectral"), default="spectral")
    p.add_argument("--seed", type=int, default=0, help="seed of the random initialisation")
    p.add_argument("--metrics", action="store_true", help="compare with <panel>/truth and write metrics.csv")
    p.add_argument("--pca", type=int, default=3, help="number of principal components of W for --metrics")
    p.add_argument("--record-timings", dest="record_timings", action="store_true", help="store wall times (breaks byte-identical output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lspvar", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=False, help="output directory")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--config", help="key = value file; command-line flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a panel and its ground truth")
    p.add_argument("--preset", choices=("example1", "large", "rankstudy"))
    p.add_argument("--seed", type=int)
    for name, typ in (("M", int), ("p", int), ("r", int), ("s", float), ("T", int)):
        p.add_argument(f"--{name}", type=typ)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit one penalty or a BIC grid")
    _add_solver_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", parents=[common], help="fit --eta-grid (default grid when omitted)")
    _add_solver_args(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("diagnose", parents=[common], help="stability, incoherence and PCA of an estimate")
    p.add_argument("--estimate", help="estimate bundle directory (default: --out)")
    p.add_argument("--pca", type=int, default=3)
    p.set_defaults(func=cmd_diagnose)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
        # re-parse with the file as defaults so explicit flags win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            action = known.get(key)
            if action is None:
                parser.error(f"{key!r} does not apply to {args.command}")
            if action.nargs == 0:
                defaults[key] = _bool(value)
            elif action.type is not None:
                defaults[key] = action.type(value)
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.out is None and not (args.command == "diagnose" and args.estimate):
        parser.error("--out is required")
    if args.command == "simulate" and args.seed is None:
        parser.error("simulate requires --seed")
    if args.command in ("fit", "tune") and not args.panel:
        parser.error(f"{args.command} requires --panel")
    if args.command == "fit" and args.eta is not None and args.eta_grid:
        parser.error("give --eta or --eta-grid, not both")
    return args


# --- output staging -----------------------------------------------------------


class Staging:
    """Write into a sibling temporary directory and move files into place only on success."""

    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=self.out.parent))

    def commit(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for item in sorted(self.dir.iterdir()):
            target = self.out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            shutil.move(str(item), str(target))
        self.dir.rmdir()

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in NOT_ECHOED}


# --- commands ----------------------------------------------------------------


def cmd_simulate(args, stage: Path) -> dict:
    if args.preset:
        overrides = {k: getattr(args, k) for k in ("M", "p", "r", "s", "T", "burn_in") if getattr(args, k) is not None}
        spec = preset(args.preset, args.seed, **overrides)
    else:
        missing = [k for k in ("M", "p", "r", "s", "T") if getattr(args, k) is None]
        if missing:
            raise ValueError(f"without --preset, simulate needs {', '.join('--' + k for k in missing)}")
        kw = {k: getattr(args, k) for k in ("M", "p", "r", "s", "T")}
        if args.burn_in is not None:
            kw["burn_in"] = args.burn_in
        spec = DgpSpec(seed=args.seed, **kw)
    truth, raw = generate(spec)
    write_panel_dir(raw, stage)
    bundle.write_truth(stage / "truth", truth, spec, raw.ids)
    return {"entities": raw.M, "p": spec.p}


def _solver_config(args, M: int, p: int, eta: float) -> SolverConfig:
    rank = args.rank if args.rank is not None else max(1, p // 2)
    cfg = SolverConfig(r_hat=rank, eta=eta, ell=_auto_float(args.ell), rho=_auto_float(args.rho), eps=args.eps, max_iter=args.max_iter)
    return cfg.resolve(M, p)


def _initial_state(args, panel, cfg):
    if args.init == "random":
        return init_random(panel.p, panel.M, cfg, args.seed)
    return init_spectral(panel, cfg)


def _fit_command(args, stage: Path, grid: bool) -> dict:
    panel = build_panel(read_panel(args.panel))
    cfg = _solver_config(args, panel.M, panel.p, args.eta if args.eta is not None else 0.0)
    init = _initial_state(args, panel, cfg)
    report = {"entities": list(panel.ids), "M": panel.M, "p": panel.p}
    t0 = time.perf_counter()
    if grid:
        etas = parse_grid(args.eta_grid) if args.eta_grid else default_eta_grid(panel)
        state, records, traces = grid_search_eta(panel, cfg, etas, init)
        write_bic_path(records, stage / "bic_path.csv")
        ok = [i for i, r in enumerate(records) if r.ok]
        best = min(ok, key=lambda i: records[i].bic)
        trace, rec = traces[best], records[best]
        report["eta_grid"] = [float(e) for e in etas]
        report["failed_grid_points"] = [records[i].eta for i in range(len(records)) if not records[i].ok]
        cfg_used = SolverConfig(**{**cfg.__dict__, "eta": rec.eta})
    else:
        state, trace = fit(panel, cfg, init)
        rec = bic(state, panel, cfg.ell, cfg.eta, trace)
        cfg_used = cfg
    elapsed = time.perf_counter() - t0
    report.update(
        solver={k: (float(v) if isinstance(v, float) else v) for k, v in cfg_used.__dict__.items()},
        rho=trace.rho,
        kappa=trace.kappa,
        termination=trace.reason,
        converged=trace.converged,
        iterations=trace.iterations,
        restarts=trace.restarts,
        G_final=trace.G[-1] if trace.records else trace.G0,
        F_final=trace.records[-1].F if trace.records else None,
        primal_residual=trace.records[-1].primal_residual if trace.records else None,
        bic={"eta": rec.eta, "rss": rec.rss, "dof": rec.dof, "bic": rec.bic},
        max_kkt_before_refine=float(np.max(trace.kkt_before_refine)) if trace.kkt_before_refine is not None else None,
    )
    if args.record_timings:
        report["timings"] = {"fit_seconds": elapsed}
    if not trace.converged:
        log.warning("solver stopped at the iteration limit without meeting the tolerance")
    if args.metrics:
        truth_dir = Path(args.panel) / "truth"
        truth, _ = bundle.read_truth(truth_dir)
        metrics = compute_metrics(state, truth, cfg.ell, ids=panel.ids)
        write_metrics(stage / "metrics.csv", metrics)
        scores, ratios = pca_weights(state.w, min(args.pca, panel.M, panel.p))
        write_pca(stage, panel.ids, scores, ratios)
        report["metrics_by_cluster"] = metrics.by_cluster()
    bundle.write_estimate(stage, state, panel.ids, trace, None, timings=args.record_timings)
    return report


def cmd_fit(args, stage: Path) -> dict:
    return _fit_command(args, stage, grid=args.eta is None)


def cmd_tune(args, stage: Path) -> dict:
    return _fit_command(args, stage, grid=True)


def cmd_diagnose(args, stage: Path) -> dict:
    est_dir = Path(args.estimate or args.out)
    state, ids = bundle.read_estimate(est_dir)
    a = state.transition()
    stab = stability_report(a)
    with open(stage / "stability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "spectral_radius", "is_stable"])
        for eid, (ok, radius) in zip(ids, stab):
            w.writerow([eid, repr(radius), int(ok)])
    rep = incoherence(state.s, state.phi_c)
    with open(stage / "incoherence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "sigma", "mu", "nu", "product"])
        for m, eid in enumerate(ids):
            for k, sig in enumerate(rep.sigma_grid):
                w.writerow([eid, repr(float(sig)), repr(float(rep.mu[m, k])), repr(float(rep.nu[k])), repr(float(rep.product[m, k]))])
    k = min(args.pca, len(ids), state.p)
    scores, ratios = pca_weights(state.w, k)
    write_pca(stage, ids, scores, ratios)
    return {
        "estimate": str(est_dir),
        "unstable": [eid for eid, (ok, _) in zip(ids, stab) if not ok],
        "incoherence_violations": [ids[m] for m in rep.violations],
        "pca_explained_variance": [float(x) for x in ratios],
    }


# --- CSV writers ------------------------------------------------------------


def _cell(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def write_metrics(path: Path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "cluster", *metrics.COLUMNS])
        for m, (eid, label) in enumerate(zip(metrics.entity, metrics.cluster)):
            w.writerow([eid, label, *(_cell(getattr(metrics, c)[m]) for c in metrics.COLUMNS)])


def write_pca(stage: Path, ids, scores, ratios) -> None:
    k = scores.shape[1]
    bundle.write_matrix(stage / "pca_scores.csv", scores, ["entity", *(f"pc{i + 1}" for i in range(k))], list(ids))
    bundle.write_matrix(stage / "pca_variance.csv", np.asarray(ratios)[:, None], ["explained_variance_ratio"])


# --- entry point ---------------------------------------------------------------


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or args.estimate)
    stage = Staging(out)
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            summary = args.func(args, stage.dir)
        report = {"command": args.command, "config": _echo(args), **summary}
        bundle.write_json(stage.dir / "report.json", report)
        stage.commit()
    except (LspvarError, OSError, ValueError, ArithmeticError) as exc:
        stage.abort()
        print(f"lspvar {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        stage.abort()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
