"""Command-line experiment runner.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then command-line flags, later sources winning. Every output
file carries the effective config, the master seed and the package version.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats as sps

from . import __version__
from .errors import ConfigError, ContinuationError, DomainError, InfeasibleLevelsError
from .estimator import batched_means_var, error_report, level_stats, ml_estimate, summary_json
from .oracle import oracle_report
from .problems import darcy_problem, nested_gaussians, shifting_gaussians, subsampling_baseline
from .problems.darcy import DarcySpec
from .sampler import run_hierarchy, write_trajectory
from .streams import derive_seed
from .tuner import continuation, fit_params, fit_rates

PROBLEMS = ("nested", "shifting", "darcy")
MODES = ("fixed-run", "rates", "continuation", "oracle-check", "baseline-compare")


@dataclass
class RunConfig:
    problem: str = "nested"
    mode: str = "fixed-run"
    levels: int = 6
    samples: int = 50_000
    burnin: Optional[int] = None
    replicas: int = 20
    runs: int = 20
    tol: float = 0.1
    tols: Optional[list] = None
    tol0: float = 0.5
    r1: float = 2.0
    r2: float = 1.1
    L0: int = 2
    L_max: int = 10
    n_screen: int = 1000
    max_iter: int = 20
    corrected_allocation: bool = False
    grid_n: int = 64
    mse_samples: int = 500
    mse_replicas: int = 10_000
    master_seed: int = 0
    output_dir: str = "out"
    emit_trajectories: bool = False
    threads: int = 0
    paper_scale: bool = False

    def validate(self) -> "RunConfig":
        if self.problem not in PROBLEMS:
            raise ConfigError("problem", f"must be one of {PROBLEMS}")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        positive_ints = ("samples", "replicas", "runs", "grid_n", "mse_samples", "mse_replicas", "max_iter")
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.levels < 0:
            raise ConfigError("levels", "must be >= 0")
        if self.burnin is not None and self.burnin < 0:
            raise ConfigError("burnin", "must be >= 0")
        if not self.tol0 > 0:
            raise ConfigError("tol0", "must be positive")
        for t in self.tolerances:
            if not t > 0:
                raise ConfigError("tol", "must be positive")
        if not self.r1 >= self.r2 > 1:
            raise ConfigError("r1", "need r1 >= r2 > 1")
        if not 1 <= self.L0 <= self.L_max:
            raise ConfigError("L0", "need 1 <= L0 <= L_max")
        if self.n_screen < 100:
            raise ConfigError("n_screen", "screening needs at least 100 samples per level")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be an unsigned 64-bit integer")
        if self.threads < 0:
            raise ConfigError("threads", "must be >= 0")
        return self

    @property
    def tolerances(self) -> list:
        return list(self.tols) if self.tols else [self.tol]

    def echo(self) -> dict:
        return dataclasses.asdict(self)


def _threads(cfg: RunConfig) -> int:
    if cfg.threads:
        return cfg.threads
    env = os.environ.get("MLMC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError("MLMC_THREADS", f"not an integer: {env!r}")
        if n < 1:
            raise ConfigError("MLMC_THREADS", "must be >= 1")
        return n
    return os.cpu_count() or 1


def make_problem(cfg: RunConfig, L: int):
    if cfg.problem == "nested":
        return nested_gaussians(max(L, 1))
    if cfg.problem == "shifting":
        return shifting_gaussians(max(L, 1))
    if L > 4:
        raise ConfigError("levels", "darcy supports at most 4 levels above the coarsest")
    return darcy_problem(DarcySpec(L_max=max(L, 1)))


# ---------------------------------------------------------------- output helpers


def _meta(cfg: RunConfig) -> dict:
    return {"version": __version__, "master_seed": cfg.master_seed, "config": cfg.echo()}


def _write_json(path: Path, cfg: RunConfig, payload: dict):
    doc = dict(_meta(cfg))
    doc.update(payload)
    path.write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _write_csv(path: Path, cfg: RunConfig, header: list, rows: list):
    """RFC-4180 table; the version, seed and config echo ride along as trailing columns."""
    conf = json.dumps(cfg.echo(), sort_keys=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header + ["master_seed", "version", "config"])
    for r in rows:
        w.writerow([_fmt(v) for v in r] + [cfg.master_seed, __version__, conf])
    path.write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _ci(samples: np.ndarray, level: float = 0.95) -> tuple[float, float, float]:
    x = np.asarray(samples, float)
    m = float(np.mean(x))
    if x.size < 2:
        return m, math.nan, math.nan
    half = float(sps.t.ppf(0.5 + level / 2, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size))
    return m, m - half, m + half


# ---------------------------------------------------------------- commands


def rates_study(problem, L: int, n: int, replicas: int, master_seed: int, burnin=None, executor=None,
                boot: int = 1000, fit_from: int = 1) -> dict:
    """Replicated fixed-size runs; per-level moments of ``Y_l`` and fitted decay rates."""
    s = problem.hierarchy.refinement_factor
    nb = None if burnin is None else [burnin] * (L + 1)

    def one(r):
        runs = run_hierarchy(problem, [n] * (L + 1), master_seed, replica=r, burnin=nb)
        out = np.zeros((4, L + 1))
        for l, run in enumerate(runs):
            y = run.qoi_fine - (run.qoi_coarse if l > 0 else 0.0)
            out[:, l] = (np.mean(np.abs(y)), np.var(y, ddof=1), np.mean(y), run.sync.mean() if l > 0 else 1.0)
        return out

    reps = list(executor.map(one, range(replicas))) if executor else [one(r) for r in range(replicas)]
    arr = np.stack(reps)  # (R, 4, L+1)
    per_rep = {"absY": arr[:, 0], "varY": arr[:, 1], "meanY": arr[:, 2], "sync": arr[:, 3]}
    levels = list(range(fit_from, L + 1))

    def fits(idx):
        absm = np.abs(arr[idx, 2].mean(0))
        var = arr[idx, 1].mean(0)
        eabs = arr[idx, 0].mean(0)
        return (fit_rates([(l, absm[l]) for l in levels], s)[1], fit_rates([(l, var[l]) for l in levels], s)[1],
                fit_rates([(l, eabs[l]) for l in levels], s)[1])

    alpha_w, beta, abs_rate = fits(np.arange(replicas))
    rng = np.random.default_rng(derive_seed(master_seed, 10**6))
    bs = np.array([fits(rng.integers(0, replicas, replicas)) for _ in range(boot)])
    lo, hi = np.percentile(bs, [2.5, 97.5], axis=0)
    table = []
    for l in range(L + 1):
        row = {"level": l}
        for key, src in (("mean_absY", "absY"), ("var_Y", "varY"), ("mean_Y", "meanY"), ("sync_rate", "sync")):
            m, a, b = _ci(per_rep[src][:, l])
            row[key], row[key + "_ci_lo"], row[key + "_ci_hi"] = m, a, b
        table.append(row)
    return {
        "table": table,
        "alpha_w": float(alpha_w), "alpha_w_ci": [float(lo[0]), float(hi[0])],
        "beta": float(beta), "beta_ci": [float(lo[1]), float(hi[1])],
        "mean_absY_rate": float(abs_rate), "mean_absY_rate_ci": [float(lo[2]), float(hi[2])],
        "fit_levels": levels, "replicas": replicas, "samples": n,
    }


def cmd_rates(cfg: RunConfig, out: Path) -> bool:
    if cfg.replicas < 2:
        raise ConfigError("replicas", "need ≥2 replicas for CIs")
    if cfg.levels < 2:
        raise ConfigError("levels", "need at least levels 0..2 to fit rates")
    p = make_problem(cfg, cfg.levels)
    with ThreadPoolExecutor(_threads(cfg)) as ex:
        res = rates_study(p, cfg.levels, cfg.samples, cfg.replicas, cfg.master_seed, cfg.burnin, ex)
    cols = list(res["table"][0].keys())
    _write_csv(out / "rates.csv", cfg, cols, [[row[c] for c in cols] for row in res["table"]])
    summary = {k: v for k, v in res.items() if k != "table"}
    _write_json(out / "rates.json", cfg, summary)
    print(f"alpha_w = {res['alpha_w']:.3f} {res['alpha_w_ci']}, beta = {res['beta']:.3f} {res['beta_ci']}")
    return all(np.isfinite([res["alpha_w"], res["beta"]]))


def cmd_continuation(cfg: RunConfig, out: Path) -> bool:
    for t in cfg.tolerances:
        if t >= cfg.tol0:
            raise ConfigError("tol", f"tol={t} must be below tol0={cfg.tol0}")
    p = make_problem(cfg, cfg.L_max)
    exact = p.exact_qoi
    history, estimates, ok = [], [], True

    def one(args):
        tol, k = args
        seed = derive_seed(cfg.master_seed, k)
        try:
            res = continuation(p, tol, cfg.tol0, cfg.r1, cfg.r2, cfg.n_screen, cfg.L0, min(cfg.L_max, p.max_level),
                               seed, cfg.max_iter, cfg.corrected_allocation,
                               burnin=None if cfg.burnin is None else (lambda n: cfg.burnin))
            return tol, k, seed, res, None
        except (ContinuationError, InfeasibleLevelsError) as e:
            return tol, k, seed, None, e

    jobs = [(tol, k) for tol in cfg.tolerances for k in range(cfg.runs)]
    with ThreadPoolExecutor(_threads(cfg)) as ex:
        results = list(ex.map(one, jobs))
    summary = []
    for tol in cfg.tolerances:
        errs = []
        for t, k, seed, res, err in results:
            if t != tol:
                continue
            if err is not None:
                ok = False
                rec = {"tol": tol, "run": k, "seed": seed, "error": str(err)}
                estimates.append(rec)
                history.append({**rec, "history": getattr(err, "history", None)})
                continue
            rec = {"tol": tol, "run": k, "seed": seed, **res.as_dict()}
            if exact is not None:
                rec["er2"] = (res.estimate - exact) ** 2
                errs.append(rec["er2"])
            estimates.append(rec)
            history.append({"tol": tol, "run": k, "seed": seed, "history": res.history})
            ok &= res.converged
        entry = {"tol": tol, "runs": cfg.runs}
        if errs:
            entry["mse"] = float(np.mean(errs))
            entry["mse_le_tol2"] = entry["mse"] <= tol * tol
            ok &= entry["mse_le_tol2"]
            print(f"tol={tol}: mean er^2 = {entry['mse']:.4g} (tol^2 = {tol * tol:.4g})")
        summary.append(entry)
    _write_json(out / "history.json", cfg, {"runs": history})
    _write_json(out / "estimate.json", cfg, {"estimates": estimates, "summary": summary, "exact": exact})
    return ok


def cmd_oracle_check(cfg: RunConfig, out: Path) -> bool:
    if cfg.problem == "darcy":
        raise ConfigError("problem", "oracle-check supports the 1-D problems only (nested, shifting)")
    if cfg.levels < 1:
        raise ConfigError("levels", "oracle-check needs levels >= 1")
    p = make_problem(cfg, cfg.levels)

    def one(level):
        return oracle_report(p, level, cfg.grid_n, mse_n=cfg.mse_samples, replicas=cfg.mse_replicas,
                             seed=derive_seed(cfg.master_seed, level))

    with ThreadPoolExecutor(_threads(cfg)) as ex:
        reports = list(ex.map(one, range(1, cfg.levels + 1)))
    payload = []
    for r in reports:
        d = json.loads(r.to_json())
        payload.append(d)
        print(f"level {r.level}: {'PASS' if r.passed else 'FAIL'} {r.checks()}")
    _write_json(out / "oracle.json", cfg, {"levels": payload})
    return all(r.passed for r in reports)


def _marginal_row(level, method, theta, exact, sync, n):
    x = np.asarray(theta, float)[:, 0]
    se = math.sqrt(batched_means_var(x) / x.size)
    m = float(x.mean())
    return [level, method, m, se, exact, (m - exact) / se if se > 0 else math.inf, sync, n]


def cmd_baseline_compare(cfg: RunConfig, out: Path) -> bool:
    if cfg.problem == "darcy":
        raise ConfigError("problem", "baseline-compare supports nested and shifting only")
    L = cfg.levels
    p = make_problem(cfg, L)
    Ns = [cfg.samples] * (L + 1)
    nb = None if cfg.burnin is None else [cfg.burnin] * (L + 1)
    runs = run_hierarchy(p, Ns, cfg.master_seed, burnin=nb, keep_samples=True)
    base = subsampling_baseline(p, Ns, derive_seed(cfg.master_seed, 1), burnin=nb)
    rows, ok = [], True
    for l in range(L + 1):
        exact = p.exact_mean(l)
        for method, run in (("coupled-imh", runs[l]), ("subsampling", base.runs[l])):
            sync = float(run.sync.mean()) if l > 0 else 1.0
            row = _marginal_row(l, method, run.theta_fine, exact, sync, run.n)
            rows.append(row)
            z = abs(row[5])
            if method == "coupled-imh" or cfg.problem == "nested":
                ok &= z < 3.0
            elif l == 3:
                ok &= z > 5.0
    _write_csv(out / "compare.csv", cfg, ["level", "method", "mean", "se", "exact", "z", "sync_rate", "n"], rows)
    for r in rows:
        print(f"level {r[0]} {r[1]:>12}: mean {r[2]: .4f} exact {r[4]: .4f} z {r[5]: .2f}")
    return ok


def cmd_run(cfg: RunConfig, out: Path) -> bool:
    L = cfg.levels
    p = make_problem(cfg, L)
    Ns = [cfg.samples] * (L + 1)
    nb = None if cfg.burnin is None else [cfg.burnin] * (L + 1)
    runs = run_hierarchy(p, Ns, cfg.master_seed, burnin=nb, keep_samples=cfg.emit_trajectories)
    h = p.hierarchy
    st = [level_stats(r, h, keep_raw=False) for r in runs]
    report = None
    if L >= 1:
        params = fit_params(st, h.refinement_factor)
        report = error_report(st, params.alpha_w, h.refinement_factor, cfg.tol)
    rows = [[s.level, s.n, s.y_mean, s.y_var_asymptotic, s.sync_rate, s.cost_per_sample] for s in st]
    _write_csv(out / "levels.csv", cfg, ["level", "n", "y_mean", "sigma2", "sync_rate", "cost"], rows)
    doc = json.loads(summary_json(st, report))
    doc["estimate"] = ml_estimate(st)
    doc["work"] = [r.work for r in runs]
    if p.metadata and "theta_true" in p.metadata:
        doc["data"] = {k: p.metadata[k] for k in ("theta_true", "data_seed", "data_level", "noise_std")}
    _write_json(out / "summary.json", cfg, doc)
    if cfg.emit_trajectories:
        for r in runs:
            write_trajectory(r, out / f"trajectory_level{r.level}.csv")
    print(f"estimate = {doc['estimate']:.6g}" + (f", total error {report.total:.4g} (tol^2 {cfg.tol**2:.4g})"
                                                   if report else ""))
    return True


COMMANDS = {
    "run": ("fixed-run", cmd_run),
    "rates": ("rates", cmd_rates),
    "continuation": ("continuation", cmd_continuation),
    "oracle-check": ("oracle-check", cmd_oracle_check),
    "baseline-compare": ("baseline-compare", cmd_baseline_compare),
}

PAPER_SCALE = {"rates": {"replicas": 100}, "continuation": {"runs": 100}}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlmcmc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("--config", type=Path, help="JSON document with RunConfig keys")
        sp_.add_argument("--seed", type=int, dest="master_seed", help="master seed (unsigned 64-bit)")
        sp_.add_argument("--threads", type=int, help="worker threads (default: $MLMC_THREADS or CPU count)")
        sp_.add_argument("--out", dest="output_dir", help="output directory")
        sp_.add_argument("--paper-scale", action="store_true", default=None, help="full-size study: 100 replicas (rates) or 100 runs (continuation)")
        sp_.add_argument("--problem", choices=PROBLEMS)
        sp_.add_argument("--levels", type=int)
        sp_.add_argument("--samples", type=int)
        sp_.add_argument("--burnin", type=int)
        sp_.add_argument("--replicas", type=int)
        sp_.add_argument("--runs", type=int)
        sp_.add_argument("--tol", type=float)
        sp_.add_argument("--tols", type=float, nargs="+")
        sp_.add_argument("--tol0", type=float)
        sp_.add_argument("--r1", type=float)
        sp_.add_argument("--r2", type=float)
        sp_.add_argument("--L0", type=int)
        sp_.add_argument("--L-max", dest="L_max", type=int)
        sp_.add_argument("--grid-n", dest="grid_n", type=int)
        sp_.add_argument("--mse-samples", dest="mse_samples", type=int)
        sp_.add_argument("--mse-replicas", dest="mse_replicas", type=int)
        sp_.add_argument("--emit-trajectories", action="store_true", default=None)
        sp_.add_argument("--corrected-allocation", action="store_true", default=None)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    mode = COMMANDS[args.command][0]
    values: dict = {"mode": mode}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config", f"cannot read {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for k in loaded:
            if k not in known:
                raise ConfigError(k, "unknown config key")
        values.update(loaded)
        values["mode"] = mode
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    if flags.get("paper_scale") or values.get("paper_scale"):
        values.update(PAPER_SCALE.get(args.command, {}))
    values.update(flags)
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError("config", str(e))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ok = COMMANDS[args.command][1](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DomainError, InfeasibleLevelsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
