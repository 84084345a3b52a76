"""Command-line driver and experiment recipes.

Every command reads a JSON config (``--config``) and writes JSON and CSV
files into ``--out`` (or ``$RMAB_SP_OUT``, default the working directory).
Exit codes: 0 success, 2 input error, 3 solver failure, 4 precondition not met.

Config keys (all optional unless the command needs them)::

    instance   builtin name | {"path": file} | {"random": {seed, S, H, sparsity}} | inline instance
    N          list of arm counts
    reps       replications per N (int or {"<N>": int})
    seed       master seed for simulation streams
    policies   subset of ["lp-update", "lp-fixed", "sp", "random"]
    branching  SAA branching per depth
    sp_seed    seed of the SAA scenario trees
    sp_seeds   SAA seeds averaged by exact comparisons
    kappa, box policy-class overrides
    d, stage   scaled root state and stage for solve-sp
    survey     {"H": 5, "alpha": 0.4, "arms": [{"S": 5, "sparsity": "half", "count": 1000}]}
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import sim
from . import sp as spmod
from .fluid import FluidResolver, FluidSolution, PolicyParams, policy_constants, solve_fluid
from .lp import LpError
from .model import InstanceError, RmabInstance, builtin, covariances, from_dict, load_instance, random_instance

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_PRECONDITION = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class PreconditionError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    instance: object = "two-state"
    N: list[int] = field(default_factory=lambda: [100])
    reps: object = 1000
    seed: int = 0
    policies: list[str] = field(default_factory=lambda: ["lp-update", "sp"])
    branching: list[int] | None = None
    sp_seed: int = 0
    sp_seeds: list[int] | None = None
    kappa: float | None = None
    box: float = 20.0
    d: list[float] | None = None
    stage: int = 1
    survey: dict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        if not isinstance(cfg.N, list) or not all(isinstance(n, int) and n > 0 for n in cfg.N):
            raise ConfigError("N must be a list of positive integers")
        if not isinstance(cfg.seed, int):
            raise ConfigError("seed must be an integer")
        for p in cfg.policies:
            if p not in ("lp-update", "lp-fixed", "sp", "random"):
                raise ConfigError(f"unknown policy {p!r}")
        return cfg

    def reps_for(self, N: int) -> int:
        if isinstance(self.reps, dict):
            try:
                return int(self.reps[str(N)])
            except KeyError:
                raise ConfigError(f"no replication count for N={N}") from None
        return int(self.reps)

    def load_instance(self) -> RmabInstance:
        src = self.instance
        if isinstance(src, str):
            return builtin(src)
        if isinstance(src, dict) and "path" in src:
            return load_instance(src["path"])
        if isinstance(src, dict) and "random" in src:
            spec = src["random"]
            return random_instance(int(spec["seed"]), int(spec["S"]), int(spec["H"]),
                                   float(spec.get("alpha", 0.4)), spec.get("sparsity", "dense"))
        if isinstance(src, dict):
            return from_dict(src)
        raise ConfigError("instance must be a builtin name or an object")


def read_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ output helpers

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def write_csv(path: Path, schema: str, header: list[str], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# rmab-sp v{__version__} schema={schema}\n")
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in header})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ------------------------------------------------------------------ recipes

def fluid_report(fluid: FluidSolution) -> dict:
    inst = fluid.instance
    return {
        "instance": inst.name,
        "value": fluid.value,
        "value_original_scale": inst.unshift(fluid.value),
        "degenerate": fluid.degenerate,
        "unique": fluid.unique,
        "sigma": fluid.sigma,
        "x_star": fluid.x_star,
        "y_star": fluid.y_star,
    }


def setup(instance: RmabInstance, kappa=None, box=20.0):
    """Fluid solution, policy constants and stage covariances of an instance."""
    fluid = solve_fluid(instance, method="auto")
    if kappa is None and fluid.sigma is None:
        kappa = 2.0 + 6.0 * instance.S
    params = policy_constants(instance, fluid, kappa=kappa, box=box)
    gammas = covariances(instance, fluid.y_star).gamma
    return fluid, params, gammas


def sp_policy(instance, fluid, params, gammas, branching, seed, resolver=None) -> sim.SpPolicyN:
    scaled = spmod.SpPolicy(fluid, gammas, params, branching, seed)
    return sim.SpPolicyN(instance, fluid, params, scaled, sim.LpUpdatePolicy(instance, resolver))


def compare_exact(instance: RmabInstance, Ns, policies, sp_seeds, branching=None, kappa=None, box=20.0,
                  setup_=None) -> list[dict]:
    """Exact values and ``N * (V_opt - V_policy)`` of each policy on a two-state instance.

    The SP policy depends on its sampled scenario trees; its row averages the
    exact value over ``sp_seeds`` and reports a 95% interval across seeds.
    """
    fluid, params, gammas = setup_ or setup(instance, kappa, box)
    resolver = FluidResolver(instance)
    rows = []
    for N in Ns:
        v_opt = sim.dp_optimal(instance, N).value
        rows.append(dict(N=N, policy="opt", mean=instance.unshift(v_opt), ci=0.0, reps=0, seed="", n_gap=0.0))
        for kind in policies:
            if kind == "random":
                continue
            if kind == "sp":
                vals = np.array([sim.dp_evaluate(sp_policy(instance, fluid, params, gammas, branching, s, resolver),
                                                 instance, N) for s in sp_seeds])
                ci = 1.96 * vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0
                seeds = " ".join(map(str, sp_seeds))
            else:
                pol = (sim.LpUpdatePolicy(instance, resolver) if kind == "lp-update"
                       else sim.LpFixedPolicy(instance, fluid, params))
                vals, ci, seeds = np.array([sim.dp_evaluate(pol, instance, N)]), 0.0, ""
            v = float(vals.mean())
            rows.append(dict(N=N, policy=kind, mean=instance.unshift(v), ci=ci, reps=0, seed=seeds,
                             n_gap=N * (v_opt - v), n_gap_ci=N * ci))
    return rows


def compare_paired(instance: RmabInstance, Ns, reps_for, seed: int, sp_seed: int, branching=None, kappa=None,
                   box=20.0, setup_=None, baseline="lp-update") -> list[dict]:
    """Coupled Monte Carlo comparison of the SP policy against ``baseline``.

    Both policies run on the same per-arm transition uniforms; the ``diff``
    row holds ``N * (V_SP - V_baseline)`` (total reward difference) with a 95%
    interval and a one-sided 95% lower bound.
    """
    fluid, params, gammas = setup_ or setup(instance, kappa, box)
    resolver = FluidResolver(instance)
    scaled = spmod.SpPolicy(fluid, gammas, params, branching, sp_seed)
    rows = []
    for N in Ns:
        reps = reps_for(N)
        spn = sim.SpPolicyN(instance, fluid, params, scaled, sim.LpUpdatePolicy(instance, resolver))
        base = (sim.LpUpdatePolicy(instance, resolver) if baseline == "lp-update"
                else sim.build_policy(sim.PolicySpec(baseline, kappa=params.kappa, box=box), instance, fluid, resolver))
        a, _ = sim.rollouts(spn, instance, N, reps, seed)
        b, _ = sim.rollouts(base, instance, N, reps, seed)
        for name, v in (("sp", a), (baseline, b)):
            r = sim.EvalReport.from_samples(v, N=N, seed=seed)
            rows.append(dict(N=N, policy=name, mean=instance.unshift(r.mean), ci=r.ci, reps=reps, seed=seed))
        diff = N * (a - b)
        se = float(diff.std(ddof=1) / math.sqrt(reps))
        rows.append(dict(N=N, policy=f"sp-minus-{baseline}", mean=float(diff.mean()), ci=1.96 * se, reps=reps,
                         seed=seed, lower95=float(diff.mean()) - 1.645 * se, fallback_steps=spn.fallback_calls))
    return rows


def survey(arms, H: int = 5, alpha: float = 0.4, log=None) -> tuple[list[dict], list[dict]]:
    """Degeneracy and uniqueness counts of random instances, one row per arm spec."""
    rows, errors = [], []
    for arm in arms:
        S, sparsity, count = int(arm["S"]), arm.get("sparsity", "dense"), int(arm.get("count", 1000))
        first = int(arm.get("first_seed", 0))
        deg = uniq = non_unique = undecided = 0
        for seed in range(first, first + count):
            try:
                fl = solve_fluid(random_instance(seed, S, H, alpha, sparsity), method="auto", vertex_cap=0)
            except (LpError, InstanceError) as exc:
                errors.append({"S": S, "sparsity": sparsity, "seed": seed, "error": str(exc)})
                continue
            deg += fl.degenerate
            uniq += fl.unique == "unique"
            non_unique += fl.unique == "non-unique"
            undecided += fl.unique not in ("unique", "non-unique")
            if fl.unique != "unique":
                errors.append({"S": S, "sparsity": sparsity, "seed": seed, "error": f"uniqueness: {fl.unique}"})
        ok = count - sum(e["S"] == S and e["sparsity"] == sparsity and not e["error"].startswith("uniqueness")
                         for e in errors)
        rows.append(dict(S=S, sparsity=sparsity, H=H, instances=count, solved=ok, degenerate=deg,
                         degenerate_pct=100.0 * deg / max(ok, 1), unique=uniq, unique_pct=100.0 * uniq / max(ok, 1),
                         non_unique=non_unique, undecided=undecided))
        if log:
            log(f"S={S} {sparsity}: degenerate {rows[-1]['degenerate_pct']:.1f}%, unique {rows[-1]['unique_pct']:.1f}%")
    return rows, errors


# ------------------------------------------------------------------ commands

def cmd_solve_fluid(cfg: ExperimentConfig, out: Path, log) -> int:
    inst = cfg.load_instance()
    fluid = solve_fluid(inst, method="auto")
    write_json(out / "fluid.json", fluid_report(fluid))
    log(f"{inst.name}: value={inst.unshift(fluid.value):.6g} degenerate={str(fluid.degenerate).lower()} "
        f"unique={fluid.unique}")
    return EXIT_OK


def cmd_solve_sp(cfg: ExperimentConfig, out: Path, log) -> int:
    inst = cfg.load_instance()
    fluid, params, gammas = setup(inst, cfg.kappa, cfg.box)
    if not fluid.degenerate:
        raise PreconditionError("instance is non-degenerate: the SP correction is not needed, use an LP-based policy")
    branching = tuple(cfg.branching) if cfg.branching else spmod.default_branching(inst.H)
    if cfg.d is None and cfg.stage == 1:
        sol = spmod.build_and_solve_saa(fluid, gammas, params, branching, seed=cfg.sp_seed)
    else:
        d = np.zeros(inst.S) if cfg.d is None else np.asarray(cfg.d, dtype=float)
        sol = spmod._solve_tree(fluid, gammas, params, branching[cfg.stage - 1:], cfg.sp_seed, cfg.stage, d, None,
                                spmod.NODE_CAP)
    report = sol.to_dict()
    report["kappa"] = params.kappa
    write_json(out / "sp.json", report)
    rows = []
    for k, dec in enumerate(sol.decisions):
        mag = np.abs(dec).max(axis=(1, 2))
        rows.append(dict(stage=sol.root_stage + k, nodes=dec.shape[0], mean_abs=float(np.abs(dec).mean()),
                         max_abs=float(mag.max()), mean_state_dev=float(np.abs(sol.states[k]).max(axis=1).mean())))
    write_csv(out / "sp_stages.csv", "sp-stages", ["stage", "nodes", "mean_abs", "max_abs", "mean_state_dev"], rows)
    log(f"root decision {np.round(sol.root, 4).tolist()} objective {sol.objective:.6g}")
    return EXIT_OK


EVAL_HEADER = ["N", "policy", "mean", "ci", "reps", "seed"]


def cmd_simulate(cfg: ExperimentConfig, out: Path, log) -> int:
    inst = cfg.load_instance()
    fluid, params, gammas = setup(inst, cfg.kappa, cfg.box)
    resolver = FluidResolver(inst)
    rows, reports = [], []
    for kind in cfg.policies:
        if kind == "sp":
            pol = sp_policy(inst, fluid, params, gammas, cfg.branching, cfg.sp_seed, resolver)
        else:
            pol = sim.build_policy(sim.PolicySpec(kind, kappa=params.kappa, box=cfg.box), inst, fluid, resolver)
        for N in cfg.N:
            rep = sim.evaluate(pol, inst, N, cfg.reps_for(N), cfg.seed, fluid)
            rows.append(dict(N=N, policy=kind, mean=inst.unshift(rep.mean), ci=rep.ci, reps=rep.reps, seed=cfg.seed))
            reports.append({"policy": kind, **rep.to_dict(), "mean_original_scale": inst.unshift(rep.mean)})
            log(f"N={N} {kind}: {inst.unshift(rep.mean):.6f} +- {rep.ci:.6f}")
    write_csv(out / "simulate.csv", "simulate", EVAL_HEADER, rows)
    write_json(out / "simulate.json", reports)
    return EXIT_OK


def cmd_dp(cfg: ExperimentConfig, out: Path, log) -> int:
    inst = cfg.load_instance()
    rows, tables = [], []
    for N in cfg.N:
        tab = sim.dp_optimal(inst, N)
        rows.append(dict(N=N, policy="opt", mean=inst.unshift(tab.value), ci=0.0, reps=0, seed=""))
        tables.append(tab.to_dict())
        log(f"N={N}: optimal value {inst.unshift(tab.value):.8f}")
    write_csv(out / "dp.csv", "dp", EVAL_HEADER, rows)
    write_json(out / "dp.json", tables)
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out: Path, log) -> int:
    inst = cfg.load_instance()
    if inst.S == 2 and inst.H <= sim.DP_MAX_H and max(cfg.N) <= sim.DP_MAX_N:
        seeds = cfg.sp_seeds if cfg.sp_seeds is not None else [cfg.sp_seed]
        rows = compare_exact(inst, cfg.N, cfg.policies, seeds, cfg.branching, cfg.kappa, cfg.box)
        header = EVAL_HEADER + ["n_gap", "n_gap_ci"]
    else:
        rows = compare_paired(inst, cfg.N, cfg.reps_for, cfg.seed, cfg.sp_seed, cfg.branching, cfg.kappa, cfg.box)
        header = EVAL_HEADER + ["lower95", "fallback_steps"]
    for r in rows:
        log(", ".join(f"{k}={r[k]:.6g}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in header if k in r))
    write_csv(out / "compare.csv", "compare", header, rows)
    return EXIT_OK


def cmd_survey(cfg: ExperimentConfig, out: Path, log) -> int:
    spec = cfg.survey or {}
    arms = spec.get("arms") or [{"S": 5, "sparsity": "half", "count": 1000}, {"S": 5, "sparsity": "dense", "count": 1000}]
    rows, errors = survey(arms, int(spec.get("H", 5)), float(spec.get("alpha", 0.4)), log)
    write_csv(out / "survey.csv", "survey", ["S", "sparsity", "H", "instances", "solved", "degenerate",
                                             "degenerate_pct", "unique", "unique_pct", "non_unique", "undecided"], rows)
    write_json(out / "survey_exceptions.json", errors)
    return EXIT_OK


EXAMPLES = {
    "two-state": {"instance": "two-state", "N": [100, 200, 400, 800, 1600], "policies": ["lp-fixed", "sp"],
                  "branching": [10000], "sp_seeds": list(range(20)), "reps": 2000, "seed": 0},
    "maintenance": {"instance": "maintenance", "N": [100, 400, 1600], "reps": {"100": 40000, "400": 30000,
                    "1600": 20000}, "branching": [2000, 1, 1, 1], "sp_seed": 0, "seed": 1},
    "survey": {"survey": {"H": 5, "alpha": 0.4, "arms": [{"S": 5, "sparsity": "half", "count": 1000},
                                                         {"S": 5, "sparsity": "dense", "count": 1000}]}},
}


def cmd_example(name: str, out: Path | None, log) -> int:
    if name not in EXAMPLES:
        raise ConfigError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}")
    text = json.dumps(EXAMPLES[name], indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        (out / f"{name}.json").write_text(text, encoding="utf-8")
        log(f"wrote {out / f'{name}.json'}")
    return EXIT_OK


COMMANDS = {
    "solve-fluid": cmd_solve_fluid,
    "solve-sp": cmd_solve_sp,
    "simulate": cmd_simulate,
    "dp-opt": cmd_dp,
    "compare": cmd_compare,
    "survey": cmd_survey,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rmab-sp", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"rmab-sp {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["example"]:
        p = sub.add_parser(name)
        if name == "example":
            p.add_argument("name", choices=sorted(EXAMPLES))
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    out_dir = args.out or os.environ.get("RMAB_SP_OUT")
    try:
        if args.command == "example":
            out = Path(out_dir) if args.out else None
            if out:
                out.mkdir(parents=True, exist_ok=True)
            return cmd_example(args.name, out, log)
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(out_dir or ".")
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, out, log)
        log(f"done in {time.perf_counter() - t0:.1f}s")
        return code
    except (ConfigError, InstanceError, KeyError, TypeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as exc:
        print(f"precondition not met: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except LpError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
