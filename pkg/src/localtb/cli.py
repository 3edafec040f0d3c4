"""Command-line orchestration: config parsing, seeded runs and report files.

Usage::

    localtb pi-bad --config config.txt --out results/
    localtb all --seed 7 --no-plots

Every subcommand writes ``report.json`` (deterministic for a given config
and seed), one or more CSV files and, unless ``--no-plots`` is given, PNG
figures.  Wall-clock timings go to ``timing.json`` so that the report stays
byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .accretive import oscillatory_system, stopping_lower_bound, trivial_system
from .bilinear import fit_decay, fit_decay_2d, full_decomposition
from .corona import (
    CoronaParams,
    build_corona,
    lambda_sweep,
    representation_check,
    sparseness,
    standard_q0,
    typeA_lemma_check,
    zero_difference_check,
)
from .czop import (
    assemble,
    bump_kernel,
    estimate_opnorm,
    hilbert_kernel,
    riesz_kernel,
    testing_constant,
    validate_kernel,
    witness_pair,
    zero_kernel,
)
from .dyfun import DyadicFunction, level_averages, test_bad_projection_decay
from .errors import ConfigError, ConsistencyError, ValidationError
from .grid import GridParams, estimate_pi_bad, new_random_grid
from .twisted import (
    admissible_context,
    closeness,
    generation_norms,
    perturbation_test,
    twisted_transform_test,
    universal_transform_test,
)

SCHEMA_VERSION = 1
COMMANDS = ("pi-bad", "projection", "corona", "transforms", "operator", "decompose", "all")


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 1
    L: int = 8
    top_level: int = 0
    eta: float = 1.0
    r: int = 4
    epsilon: str = ""
    p1: float = 2.0
    p2: float = 2.0
    delta: float = 0.1
    tau: float = 0.95
    Lambda: float = 4.0
    upsilon1: float = 0.0
    TB_proxy: float = -1.0
    kernel: str = "hilbert"
    kernel_scale: float = 1.0
    kernel_width: float = 0.5
    kernel_component: int = 0
    system: str = "trivial"
    amplitude: float = 0.6
    A: float = 0.0
    depth: int = 2
    f: str = "random"
    seed: int = 0
    seeds: int = 2
    trials: int = 1000
    q: str = "1.5,2,3"
    r_values: str = "3,4,5,6"
    out: str = "out"

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"trials must be positive, got {self.trials}")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be positive, got {self.seeds}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.kernel not in ("hilbert", "riesz", "bump", "zero"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "hilbert" and self.n != 1:
            raise ConfigError("the hilbert kernel needs n = 1")
        if self.system not in ("trivial", "oscillatory"):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.f not in ("random", "random0", "witness"):
            raise ConfigError(f"unknown test function kind {self.f!r}")
        self.grid_params()
        self.corona_params()
        self.q_values()
        self.r_list()

    def grid_params(self, **kw) -> GridParams:
        eps = Fraction(self.epsilon) if self.epsilon else None
        base = dict(n=self.n, L=self.L, top_level=self.top_level, eta=self.eta, r=self.r, epsilon=eps)
        base.update(kw)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return GridParams(**base)

    def corona_params(self) -> CoronaParams:
        return CoronaParams(
            n=self.n, p1=self.p1, p2=self.p2, delta=self.delta, tau=self.tau, Lambda=self.Lambda,
            upsilon1=self.upsilon1 if self.upsilon1 > 0 else None,
            TB_proxy=self.TB_proxy if self.TB_proxy >= 0 else None,
        )

    def q_values(self) -> list:
        try:
            qs = [float(x) for x in self.q.split(",") if x.strip()]
        except ValueError as e:
            raise ConfigError(f"bad q list {self.q!r}") from e
        if not qs or any(q <= 1 for q in qs):
            raise ConfigError("q values must exceed 1")
        return qs

    def r_list(self) -> list:
        try:
            rs = [int(x) for x in self.r_values.split(",") if x.strip()]
        except ValueError as e:
            raise ConfigError(f"bad r_values list {self.r_values!r}") from e
        if not rs or any(r < 1 or self.L <= self.top_level + r for r in rs):
            raise ConfigError(f"r_values must satisfy 1 <= r < L - top_level, got {rs}")
        return rs

    def seed_list(self) -> list:
        return [self.seed + i for i in range(self.seeds)]


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from e
    return raw


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {num}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {num}: duplicate key {key!r}")
        out[key] = _convert(key, raw)
    return out


def resolve_config(path=None, seed_flag=None, trials_flag=None, out_flag=None, env=None) -> ExperimentConfig:
    """Merge file values with overrides; seed precedence is flag > SEED env > file > 0."""
    env = os.environ if env is None else env
    values = parse_config(Path(path).read_text()) if path else {}
    if env.get("SEED") not in (None, ""):
        values["seed"] = _convert("seed", env["SEED"])
    if seed_flag is not None:
        values["seed"] = int(seed_flag)
    if trials_flag is not None:
        values["trials"] = int(trials_flag)
    if out_flag is not None:
        values["out"] = str(out_flag)
    return ExperimentConfig(**values)


# ---------------------------------------------------------------- building blocks


def make_kernel(cfg: ExperimentConfig):
    if cfg.kernel == "hilbert":
        return hilbert_kernel(cfg.kernel_scale)
    if cfg.kernel == "riesz":
        return riesz_kernel(cfg.n, cfg.kernel_component, cfg.kernel_scale)
    if cfg.kernel == "bump":
        return bump_kernel(cfg.n, cfg.kernel_width, cfg.kernel_scale)
    return zero_kernel(cfg.n)


def make_system(cfg: ExperimentConfig, grid, p: float, seed: int):
    if cfg.system == "trivial":
        return trivial_system(grid, p)
    A = cfg.A if cfg.A > 0 else 1 + cfg.amplitude
    return oscillatory_system(grid, p, A, cfg.amplitude, seed=seed, depth=cfg.depth)


def make_function(cfg: ExperimentConfig, grid, op, seed: int, which: int) -> DyadicFunction:
    N = grid.params.N
    if cfg.f == "witness":

        Q0 = standard_q0(grid)
        w = witness_pair(op, Q0)
        return w.f1 if which == 1 else w.f2
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(which, 404))))
    v = rng.uniform(-1.0, 1.0, (N,) * cfg.n)
    if cfg.f == "random0":
        v = v - level_averages(v, grid, cfg.top_level)
    return DyadicFunction(v)


def build_pair(cfg: ExperimentConfig, seed: int, op, r: int | None = None):
    """Both coronas for one seed."""
    gp = cfg.grid_params() if r is None else cfg.grid_params(r=r)
    cp = cfg.corona_params()
    g1 = new_random_grid(gp, 1, seed)
    g2 = new_random_grid(gp, 2, seed)
    s1 = make_system(cfg, g1, cp.p1, seed)
    s2 = make_system(cfg, g2, cp.p2, seed + 7919)
    f1 = make_function(cfg, g1, op, seed, 1)
    f2 = make_function(cfg, g2, op, seed, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        c1 = build_corona(1, g1, g2, s1, op, f1, gp, cp)
        c2 = build_corona(2, g2, g1, s2, op, f2, gp, cp)
    return c1, c2


def _num(x) -> float | None:
    x = float(x)
    if not np.isfinite(x):
        return None
    return float(f"{x:.12g}")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


class Run:
    """Collects results, invariant verdicts and artifacts for one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path, plots: bool, quiet: bool):
        self.cfg = cfg
        self.out = out
        self.plots = plots
        self.quiet = quiet
        self.results: dict = {}
        self.invariants: dict = {}
        self.timing: dict = {}
        self._op = None

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def check(self, name: str, ok: bool) -> None:
        self.invariants[name] = bool(self.invariants.get(name, True) and ok)

    @property
    def op(self):
        if self._op is None:
            self._op = assemble(make_kernel(self.cfg), self.cfg.L)
        return self._op

    def figure(self, name: str, draw) -> None:
        if not self.plots:
            return
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        draw(ax)
        fig.tight_layout()
        fig.savefig(self.out / f"{name}.png", dpi=100)
        plt.close(fig)


# ---------------------------------------------------------------- subcommands


def cmd_pi_bad(run: Run) -> None:
    cfg = run.cfg
    rows, est = [], []
    for r in cfg.r_list():
        gp = cfg.grid_params(r=r)
        e = estimate_pi_bad(cfg.L, gp, cfg.trials, cfg.seed)
        rows.append((r, e.estimate, e.ci95, e.trials))
        est.append(e)
    _write_csv(run.out / "pi_bad.csv", ("r", "pi_bad", "ci95", "trials"), rows)
    pos = {e.r: e.estimate for e in est if e.estimate > 0}
    slope, npts = fit_decay(pos)
    run.results["pi_bad"] = {
        "level": cfg.L,
        "estimates": [{"r": e.r, "pi_bad": _num(e.estimate), "ci95": _num(e.ci95)} for e in est],
        "log2_slope": _num(slope),
        "fit_points": npts,
        "epsilon": str(cfg.grid_params().epsilon),
    }

    def draw(ax):
        ax.errorbar([e.r for e in est], [e.estimate for e in est], yerr=[e.ci95 for e in est], marker="o")
        ax.set_yscale("log", base=2)
        ax.set_xlabel("r")
        ax.set_ylabel("estimated bad probability")

    run.figure("pi_bad", draw)


def cmd_projection(run: Run) -> None:
    cfg = run.cfg
    gp = cfg.grid_params()
    level = cfg.L - 1
    trials = max(cfg.trials, 2)
    rep = test_bad_projection_decay(2.0, level, gp, trials, cfg.seed)
    est = estimate_pi_bad(level, gp, max(trials, 100), cfg.seed + 1)
    agree = abs(rep.mean - est.estimate) <= rep.ci95 + est.ci95
    _write_csv(run.out / "projection.csv", ("trial", "ratio"), [(i, float(v)) for i, v in enumerate(rep.samples)])
    run.results["projection"] = {
        "q": 2.0, "level": level, "r": cfg.r,
        "mean": _num(rep.mean), "ci95": _num(rep.ci95),
        "pi_bad": _num(est.estimate), "pi_bad_ci95": _num(est.ci95),
        "intervals_overlap": bool(agree),
    }

    def draw(ax):
        ax.hist(rep.samples, bins=30)
        ax.axvline(est.estimate, color="k")
        ax.set_xlabel("bad-projection energy ratio")

    run.figure("projection", draw)


def _corona_rows(c, seed):
    rep = representation_check(c)
    zd = zero_difference_check(c)
    ta = typeA_lemma_check(c)
    lam = lambda_sweep(c)
    sp = sparseness(c.tree)
    low = [stopping_lower_bound(c.sys, S) for S in c.tree.stops]
    low_ok = all(a >= b * (1 - 1e-12) for a, b in low)
    row = {
        "seed": seed, "grid": c.j, "stops": len(c.tree), "kept": int(c.kept.sum()),
        "B_cubes": len(c.B), "measure_B": c.measure_B(), "G_cubes": len(c.good_cubes()),
        "rep_rel_l2": rep.rel_l2, "rep_max_abs": rep.max_abs, "phi_constant": rep.phi_constant,
        "zero_diff_cubes": zd.qualifying, "zero_diff_violations": zd.violations,
        "mean_err": ta.mean_err, "min_beta_avg": ta.min_avg, "C_maximal": ta.C_maximal,
        "C_operator": ta.C_operator, "lambda_max": lam.max_abs, "sparseness_max": float(sp.max()),
        "T_loc": c.T_loc, "TB_proxy": c.TB_proxy,
    }
    return row, low_ok


def cmd_corona(run: Run) -> None:
    cfg = run.cfg
    rows = []
    for seed in cfg.seed_list():
        c1, c2 = build_pair(cfg, seed, run.op)
        for c in (c1, c2):
            row, low_ok = _corona_rows(c, seed)
            rows.append(row)
            run.check("representation", row["rep_rel_l2"] <= 1e-9)
            run.check("zero_difference", row["zero_diff_violations"] == 0)
            run.check("beta_mean", row["mean_err"] <= 1e-12)
            run.check("beta_lower_quarter", row["min_beta_avg"] >= 0.25 or not np.isfinite(row["min_beta_avg"]))
            run.check("sparseness", row["sparseness_max"] <= cfg.tau)
            run.check("stopping_lower_bound", low_ok)
    keys = list(rows[0])
    _write_csv(run.out / "corona.csv", keys, [[r[k] for k in keys] for r in rows])
    run.results["corona"] = [{k: (_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows]

    def draw(ax):
        ax.bar(range(len(rows)), [r["measure_B"] for r in rows])
        ax.set_xlabel("run (seed, grid)")
        ax.set_ylabel("|B|")

    run.figure("corona_measure_B", draw)


def cmd_transforms(run: Run) -> None:
    cfg = run.cfg
    rows = []
    for seed in cfg.seed_list():
        c1, _ = build_pair(cfg, seed, run.op)
        for q in cfg.q_values():
            u = universal_transform_test(c1.ctx_b, c1.f, q, trials=min(cfg.trials, 50), seed=seed)
            rows.append((seed, "universal_half", q, u.half))
            rows.append((seed, "universal_plain", q, u.plain))
            if u.delta is not None:
                rows.append((seed, "universal_delta", q, u.delta))
        rows.append((seed, "twisted_beta", c1.p_j, twisted_transform_test(c1)))
        rows.append((seed, "twisted_b", c1.p_j, twisted_transform_test(c1, variant="b")))
        for depth, norm, meas in generation_norms(c1):
            rows.append((seed, f"generation_{depth}", c1.p_j, norm))
        # perturbation run on the first top cube with its stopping children as terminals
        S0 = c1.tree.stops[0]
        kids = [c1.tree.stops[i] for i in c1.tree.children_ids(0)]
        ids = [0] + c1.tree.children_ids(0)
        cb = admissible_context(c1.grid, S0, c1.sys.values(S0), kids, [c1.sys.values(K) for K in kids], c1.p_j)
        cq = admissible_context(c1.grid, S0, c1.beta[0], kids, [c1.beta[i] for i in ids[1:]], c1.p_j)

        close, _ = closeness(cb, cq)
        if close < 0.125:
            ups = max(close, 1e-12)
            lam_cap = float(np.abs(c1.f.values).max())
            try:
                pr = perturbation_test(cb, cq, c1.f, ups, lam_cap)
                rows.append((seed, "perturbation_ratio", c1.p_j, pr.ratio_full))
                run.check("perturbation_control", pr.control_ok)
            except ValidationError as e:
                run.log(f"perturbation test skipped: {e}")
    _write_csv(run.out / "transforms.csv", ("seed", "quantity", "q", "value"), rows)
    run.results["transforms"] = [{"seed": s, "quantity": n, "q": _num(q), "value": _num(v)} for s, n, q, v in rows]
    for r in rows:
        run.check("finite_ratios", bool(np.isfinite(r[3])))


def cmd_operator(run: Run) -> None:
    cfg = run.cfg
    k = make_kernel(cfg)
    kc = validate_kernel(k, samples=min(cfg.trials * 10, 100_000), seed=cfg.seed)
    gp = cfg.grid_params()
    cp = cfg.corona_params()
    g1 = new_random_grid(gp, 1, cfg.seed)
    sys1 = make_system(cfg, g1, cp.p1, cfg.seed)
    p2d = cp.p2 / (cp.p2 - 1)
    tl = testing_constant(run.op, sys1, p_dual=p2d)
    tla = testing_constant(run.op, sys1, p_dual=p2d, adjoint=True)
    tb = estimate_opnorm(run.op, seed=cfg.seed)

    w = witness_pair(run.op, standard_q0(g1))
    run.results["operator"] = {
        "kernel": k.spec(), "C_size": _num(kc.C_size), "C_smooth": _num(kc.C_smooth),
        "samples": kc.samples, "T_loc": _num(tl), "T_loc_adjoint": _num(tla), "TB_proxy": _num(tb),
        "TB_proxy_note": "largest singular value of the discretized matrix; stands in for the operator norm",
        "witness_pairing": _num(w.pairing),
    }
    _write_csv(run.out / "operator.csv", ("quantity", "value"),
               [("C_size", kc.C_size), ("C_smooth", kc.C_smooth), ("T_loc", tl), ("T_loc_adjoint", tla),
                ("TB_proxy", tb), ("witness_pairing", w.pairing)])
    run.check("operator_finite", all(np.isfinite(x) for x in (tl, tla, tb, w.pairing)))


def cmd_decompose(run: Run) -> None:
    cfg = run.cfg
    rows, summaries, errs = [], [], []
    per_s: dict = {}
    for seed in cfg.seed_list():
        c1, c2 = build_pair(cfg, seed, run.op)
        try:
            d = full_decomposition(c1, c2)
        except ConsistencyError as e:
            run.log(f"bookkeeping failure for seed {seed}: {e}")
            run.check("bookkeeping", False)
            continue
        run.check("bookkeeping", d.bookkeeping_residual <= 1e-9)
        errs.append(d.good_sum_error)
        for row in d.half1.rows + d.half2.rows:
            rows.append((seed,) + row)
        summaries.append(dict(seed=seed, **d.summary()))
        for key in ("stop_s", "error_s", "nearby_s", "far_st"):
            for ss, v in getattr(d.half1, key).items():
                per_s.setdefault(key, {}).setdefault(ss, []).append(v)
    _write_csv(run.out / "decompose.csv", ("seed", "half", "term", "s", "t", "value", "bound_instrument", "ratio"), rows)
    means = {key: {s: float(np.mean(v)) for s, v in vals.items()} for key, vals in per_s.items()}
    fits = {}
    for key in ("stop_s", "error_s", "nearby_s"):
        if means.get(key):
            fits[key.replace("_s", "_slope")] = _num(fit_decay(means[key])[0])
    if means.get("far_st"):
        alpha, beta, _ = fit_decay_2d(means["far_st"])
        fits["far_slopes"] = [_num(alpha), _num(beta)]
    run.results["decompose"] = {
        "runs": summaries,
        "mean_good_sum_error": _num(np.mean(errs)) if errs else None,
        "fits": fits,
    }

    def draw(ax):
        for key in ("stop_s", "error_s", "nearby_s"):
            ks = sorted(means.get(key, {}))
            if ks:
                ax.semilogy(ks, [max(means[key][s], 1e-300) for s in ks], marker="o", label=key)
        ax.set_xlabel("s")
        ax.set_ylabel("per-s magnitude")
        ax.legend()

    if means.get("stop_s"):
        run.figure("decompose_stop", draw)


HANDLERS = {
    "pi-bad": cmd_pi_bad,
    "projection": cmd_projection,
    "corona": cmd_corona,
    "transforms": cmd_transforms,
    "operator": cmd_operator,
    "decompose": cmd_decompose,
}


def execute(command: str, cfg: ExperimentConfig, out: Path, plots: bool = True, quiet: bool = True) -> Run:
    """Run a subcommand and write its artifacts; returns the populated :class:`Run`."""
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out, plots, quiet)
    names = [c for c in COMMANDS if c != "all"] if command == "all" else [command]
    for name in names:
        t = time.perf_counter()
        run.log(f"running {name}")
        HANDLERS[name](run)
        run.timing[name] = time.perf_counter() - t
    report = {
        "schema": SCHEMA_VERSION,
        "command": command,
        "config": asdict(cfg),
        "results": run.results,
        "invariants": run.invariants,
        "versions": {"localtb": __version__, "numpy": np.__version__},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(run.timing, indent=1, sort_keys=True) + "\n")
    return run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="localtb", description="Local Tb experiment runner")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides SEED and config)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--trials", type=int, default=None, help="override the trial count")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.seed, args.trials, args.out)
    except (ConfigError, OSError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        run = execute(args.command, cfg, Path(cfg.out), plots=not args.no_plots, quiet=args.quiet)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    failed = sorted(k for k, ok in run.invariants.items() if not ok)
    if failed:
        print("invariant violated: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
