"""Experiment orchestration: config parsing, presets, artifact emission.

A run generates a reproducible market from (n, k, seed), builds the affine
benchmark grid, trains the requested method, and writes its artifacts into
one output directory:

    config.json              resolved config and its hash
    benchmark-slice{j}.json  benchmark policy surfaces per factor
    checkpoints/             parameter snapshots at every eval stride
    rmse.csv                 per-stride trace rows for every method run
    report.json              best-iteration summary per method
    surface-slice{j}.json    trained-policy surfaces (optional)

Every artifact names the config hash, which covers all result-determining
fields; the output directory and thread count are excluded, so two runs of
the same config produce byte-identical rmse.csv wherever and however
parallel they execute.

Presets pin the horizon: short-horizon and nonaffine use T=1.5, long-horizon
uses T=20 and additionally forces residual mode with the full variance stack,
the regime that keeps BPTT workable over eighty-step paths.  The projection
method (ppgdpo) re-reads warm-up checkpoints after training and scores the
costate-projected policy on the same grid; project_every=0 keeps that stage
cheap by projecting only the best and final checkpoints.

Config files are JSON objects over the same keys as the flags; flags win on
conflict, and the subcommand always decides the method.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import bsde as bsde_mod
from . import costates, evaluation, market, nets, riccati, train

METHODS = ("pgdpo", "ppgdpo", "bsde", "benchmark-only")
PRESETS = ("short-horizon", "long-horizon", "nonaffine")
PRESET_T = {"short-horizon": 1.5, "long-horizon": 20.0, "nonaffine": 1.5}
HASH_EXCLUDED = ("out", "threads")


class CliError(Exception):
    pass


# key -> (python type check, brief description for error messages)
_SCHEMA = {
    "n": ("int", "asset count"),
    "k": ("int", "factor count"),
    "seed": ("int", "master seed"),
    "method": ("str", "one of %s" % (METHODS,)),
    "preset": ("str", "one of %s" % (PRESETS,)),
    "beta_norm": ("float", "quadratic premium scale"),
    "iterations": ("int", "training iterations"),
    "batch": ("int", "paths per iteration"),
    "steps": ("int", "time steps per path"),
    "lr": ("float", "learning rate"),
    "lr_schedule": ("str", "constant or multistep"),
    "eval_every": ("int", "trace stride"),
    "hidden": ("ints", "policy net hidden widths"),
    "clip": ("float?", "gradient clip"),
    "mode": ("str?", "direct or residual"),
    "variance_reduction": ("str?", "variance device"),
    "m_mc": ("int", "costate paths per grid node"),
    "projection_steps": ("int", "costate rollout steps"),
    "project_every": ("int", "projection stride, 0 = best and final only"),
    "t_points": ("int", "benchmark grid time nodes"),
    "y_points": ("int", "benchmark grid factor nodes"),
    "surfaces": ("bool", "write policy surface JSONs"),
    "out": ("str", "output directory"),
    "threads": ("int?", "worker threads"),
}

_DEFAULTS = {
    "seed": 0,
    "method": "pgdpo",
    "preset": "short-horizon",
    "beta_norm": 0.0,
    "iterations": 10000,
    "batch": 1000,
    "steps": 20,
    "lr": 1e-5,
    "lr_schedule": "constant",
    "eval_every": 200,
    "hidden": (64, 64, 64),
    "clip": None,
    "mode": None,
    "variance_reduction": None,
    "m_mc": 2000,
    "projection_steps": 10,
    "project_every": 0,
    "t_points": 20,
    "y_points": 100,
    "surfaces": True,
    "out": "pgdpo-run",
    "threads": None,
}


def _check_type(key, value):
    kind = _SCHEMA[key][0]
    optional = kind.endswith("?")
    if optional:
        if value is None:
            return None
        kind = kind[:-1]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise CliError("config key '%s' expects an integer, got %r" % (key, value))
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CliError("config key '%s' expects a number, got %r" % (key, value))
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise CliError("config key '%s' expects a string, got %r" % (key, value))
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise CliError("config key '%s' expects a boolean, got %r" % (key, value))
        return value
    if kind == "ints":
        if isinstance(value, str):
            try:
                value = [int(v) for v in value.split(",") if v.strip()]
            except ValueError:
                raise CliError("config key '%s' expects integers, got %r" % (key, value))
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise CliError("config key '%s' expects a list of integers, got %r" % (key, value))
        return tuple(int(v) for v in value)
    raise CliError("unhandled schema kind for '%s'" % key)


class ExperimentConfig:
    """Resolved experiment description; immutable once constructed.

    The preset is applied at construction: the horizon always follows it,
    and long-horizon additionally pins mode='residual' with the full
    variance stack.  Elsewhere mode and variance_reduction default to
    'direct' and 'antithetic' when not given.  A nonzero beta_norm is only
    meaningful under the nonaffine preset and rejected elsewhere.
    """

    __slots__ = tuple(_SCHEMA)

    def __init__(self, **kwargs):
        unknown = set(kwargs) - set(_SCHEMA)
        if unknown:
            raise CliError("unknown config key(s): %s" % ", ".join(sorted(unknown)))
        for key in ("n", "k"):
            if key not in kwargs or kwargs[key] is None:
                raise CliError("missing required config key: %s" % key)
        merged = dict(_DEFAULTS)
        merged.update({k: v for k, v in kwargs.items() if v is not None})
        for key, value in merged.items():
            setattr(self, key, _check_type(key, value))

        if self.method not in METHODS:
            raise CliError("method must be one of %s" % (METHODS,))
        if self.preset not in PRESETS:
            raise CliError("preset must be one of %s" % (PRESETS,))
        if self.n < 1 or self.k < 1:
            raise CliError("need n >= 1 and k >= 1")
        if self.beta_norm < 0.0:
            raise CliError("beta_norm must be nonnegative")
        if self.beta_norm > 0.0 and self.preset != "nonaffine":
            raise CliError("nonzero beta_norm needs the nonaffine preset")

        if self.preset == "long-horizon":
            self.mode = "residual"
            self.variance_reduction = "antithetic+cv+richardson"
        else:
            if self.mode is None:
                self.mode = "direct"
            if self.variance_reduction is None:
                self.variance_reduction = "antithetic"
        if self.mode not in train.MODES:
            raise CliError("mode must be one of %s" % (train.MODES,))
        if self.variance_reduction not in train.DEVICES:
            raise CliError("variance_reduction must be one of %s" % (train.DEVICES,))

    @property
    def horizon(self):
        return PRESET_T[self.preset]

    def to_dict(self):
        doc = {}
        for key in _SCHEMA:
            v = getattr(self, key)
            doc[key] = list(v) if isinstance(v, tuple) else v
        return doc

    def config_hash(self):
        doc = {k: v for k, v in self.to_dict().items() if k not in HASH_EXCLUDED}
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def market(self):
        p = market.generate_params(self.n, self.k, self.seed, T=self.horizon)
        if self.beta_norm > 0.0:
            p = market.with_beta_norm(p, self.beta_norm)
        return p

    def train_config(self):
        return train.TrainConfig(
            iterations=self.iterations, batch=self.batch, steps=self.steps,
            lr=self.lr, lr_schedule=self.lr_schedule, seed=self.seed,
            mode=self.mode, variance_reduction=self.variance_reduction,
            eval_every=self.eval_every, hidden=self.hidden, clip=self.clip,
            threads=self.threads)

    def bsde_config(self):
        # the terminal-matching loss has no policy-gradient structure, so
        # the variance devices and residual form do not apply to it
        return train.TrainConfig(
            iterations=self.iterations, batch=self.batch, steps=self.steps,
            lr=self.lr, lr_schedule=self.lr_schedule, seed=self.seed,
            mode="direct", variance_reduction="none",
            eval_every=self.eval_every, hidden=self.hidden, clip=self.clip,
            threads=self.threads)


def parse_config(path=None, overrides=None):
    """Config file plus flag overrides -> ExperimentConfig.

    Unknown file keys are rejected; flags (non-None overrides) win over
    file values.
    """
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise CliError("cannot read config file: %s" % e)
        except json.JSONDecodeError as e:
            raise CliError("config file is not valid JSON: %s" % e)
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
        unknown = set(data) - set(_SCHEMA)
        if unknown:
            raise CliError("unknown config key(s): %s" % ", ".join(sorted(unknown)))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**data)


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_rmse_csv(path, traces, config_hash):
    with open(path, "w") as f:
        f.write("# config %s\n" % config_hash)
        f.write(train.CSV_HEADER + "\n")
        for tr in traces:
            for r in tr.rows:
                f.write(",".join([
                    str(r["iteration"]), tr.method,
                    repr(r["rmse_total"]), repr(r["rmse_myopic"]),
                    repr(r["rmse_hedging"]), repr(r["mean_J"]),
                    repr(r["seconds"]),
                ]) + "\n")


def _write_benchmark(grid, p, out, config_hash):
    paths = []
    for j in range(p.k):
        doc = json.loads(riccati.grid_to_json(grid, j))
        doc["config"] = config_hash
        path = os.path.join(out, "benchmark-slice%d.json" % j)
        _write_json(path, doc)
        paths.append(path)
    return paths


def _write_surfaces(candidate, grid, p, out, config_hash, tau):
    paths = []
    for j in range(p.k):
        doc = json.loads(evaluation.export_surface(candidate, grid, p, j, tau))
        doc["config"] = config_hash
        path = os.path.join(out, "surface-slice%d.json" % j)
        _write_json(path, doc)
        paths.append(path)
    return paths


def _projection_iterations(cfg, rows):
    """Checkpoint iterations the projection stage scores."""
    its = [r["iteration"] for r in rows]
    chosen = set()
    if cfg.project_every > 0:
        chosen.update(i for i in its if i % cfg.project_every == 0)
    best_it, _ = evaluation.best_iteration(rows)
    chosen.add(best_it)
    chosen.add(its[-1])
    return sorted(chosen)


def project_checkpoints(cfg, p, grid, checkpoint_dir, base_trace):
    """Stage-two scoring: costate-projected RMSE at selected checkpoints.

    Returns a 'ppgdpo' trace whose mean_J column repeats the warm-up reward
    at the matching iteration (the projection itself has no training
    objective of its own).
    """
    trace = train.TrainTrace("ppgdpo")
    by_it = {r["iteration"]: r for r in base_trace.rows}
    for it in _projection_iterations(cfg, base_trace.rows):
        path = os.path.join(checkpoint_dir, "pgdpo-%06d.ckpt" % it)
        params, extra = nets.load_checkpoint(path)
        maker = train.policy_maker(params, p, mode=extra.get("mode", cfg.mode))
        cand = costates.projection_candidate(
            maker, p, m_mc=cfg.m_mc, n_steps=cfg.projection_steps,
            seed=cfg.seed, stream="project-%d" % it, threads=cfg.threads)
        rmse = evaluation.rmse_slices(cand, grid, p)
        trace.append(it, by_it[it]["mean_J"], rmse)
    return trace


def run(cfg):
    """Full pipeline for one config; returns an artifact summary dict."""
    os.makedirs(cfg.out, exist_ok=True)
    h = cfg.config_hash()
    _write_json(os.path.join(cfg.out, "config.json"),
                {"config": cfg.to_dict(), "hash": h})

    p = cfg.market()
    affine = market.with_beta_norm(p, 0.0) if cfg.beta_norm > 0.0 else p
    sol = riccati.solve_riccati(affine)
    grid = riccati.build_grid(sol, affine, t_points=cfg.t_points,
                              y_points=cfg.y_points)
    summary = {
        "out": cfg.out,
        "hash": h,
        "method": cfg.method,
        "benchmark": _write_benchmark(grid, affine, cfg.out, h),
    }
    if cfg.method == "benchmark-only":
        return summary

    checkpoint_dir = os.path.join(cfg.out, "checkpoints")
    rmse_path = os.path.join(cfg.out, "rmse.csv")
    traces = []
    try:
        if cfg.method in ("pgdpo", "ppgdpo"):
            tcfg = cfg.train_config()
            entry = train.train_baseline if cfg.mode == "direct" else train.train_residual
            best_params, base_trace = entry(tcfg, p, benchmark=grid,
                                            checkpoint_dir=checkpoint_dir)
            traces.append(base_trace)
            best_candidate = train.policy_fn_np(best_params, p, mode=cfg.mode)
            if cfg.method == "ppgdpo":
                ptrace = project_checkpoints(cfg, p, grid, checkpoint_dir,
                                             base_trace)
                traces.append(ptrace)
                best_it, _ = evaluation.best_iteration(ptrace.rows)
                params, extra = nets.load_checkpoint(os.path.join(
                    checkpoint_dir, "pgdpo-%06d.ckpt" % best_it))
                best_candidate = costates.projection_candidate(
                    train.policy_maker(params, p, mode=extra.get("mode", cfg.mode)),
                    p, m_mc=cfg.m_mc, n_steps=cfg.projection_steps,
                    seed=cfg.seed, stream="project-%d" % best_it,
                    threads=cfg.threads)
        else:
            best_nets, trace = bsde_mod.train_bsde(
                cfg.bsde_config(), p, benchmark=grid,
                checkpoint_dir=checkpoint_dir)
            traces.append(trace)
            best_candidate = bsde_mod.bsde_candidate(best_nets, p)
    except train.TrainError as e:
        partial = getattr(e, "trace", None)
        if partial is not None and partial.rows:
            _write_rmse_csv(rmse_path, [partial], h)
        raise

    _write_rmse_csv(rmse_path, traces, h)
    metadata = {"config": h, "n": cfg.n, "k": cfg.k, "seed": cfg.seed,
                "preset": cfg.preset, "method": cfg.method,
                "beta_norm": cfg.beta_norm}
    report = evaluation.report({tr.method: tr.rows for tr in traces},
                               metadata=metadata)
    if cfg.preset == "nonaffine":
        # the grid is the affine benchmark, so the primary trace's best
        # rmse_total is exactly the deviation-from-affine measure
        primary = traces[-1]
        _, dev = evaluation.best_iteration(primary.rows)
        report["metadata"]["deviation_from_affine"] = dev
    _write_json(os.path.join(cfg.out, "report.json"), report)
    summary["rmse_csv"] = rmse_path
    summary["report"] = report

    if cfg.surfaces:
        summary["surfaces"] = _write_surfaces(
            best_candidate, grid, p, cfg.out, h, tau=0.5 * p.T)
    return summary


def _checkpoint_candidate(path, p):
    params, extra = nets.load_checkpoint(path)
    mode = extra.get("mode", "direct")
    return train.policy_fn_np(params, p, mode=mode)


def evaluate_checkpoint(cfg, checkpoint):
    """Score one checkpoint against the benchmark grid; returns the RMSEs."""
    p = cfg.market()
    affine = market.with_beta_norm(p, 0.0) if cfg.beta_norm > 0.0 else p
    sol = riccati.solve_riccati(affine)
    grid = riccati.build_grid(sol, affine, t_points=cfg.t_points,
                              y_points=cfg.y_points)
    fn = _checkpoint_candidate(checkpoint, p)
    r_tot, r_myo, r_hed = evaluation.rmse_slices(fn, grid, p)
    return {"checkpoint": checkpoint, "config": cfg.config_hash(),
            "rmse_total": r_tot, "rmse_myopic": r_myo, "rmse_hedging": r_hed}


def surface_checkpoint(cfg, checkpoint, tau=None):
    """Write policy surfaces for one checkpoint; returns the file paths."""
    p = cfg.market()
    affine = market.with_beta_norm(p, 0.0) if cfg.beta_norm > 0.0 else p
    sol = riccati.solve_riccati(affine)
    grid = riccati.build_grid(sol, affine, t_points=cfg.t_points,
                              y_points=cfg.y_points)
    fn = _checkpoint_candidate(checkpoint, p)
    os.makedirs(cfg.out, exist_ok=True)
    if tau is None:
        tau = 0.5 * p.T
    return _write_surfaces(fn, grid, p, cfg.out, cfg.config_hash(), tau)


def _add_common_flags(sp, with_method=False):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--n", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--seed", type=int)
    if with_method:
        sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--preset", choices=PRESETS)
    sp.add_argument("--beta-norm", type=float, dest="beta_norm")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lr-schedule", dest="lr_schedule",
                    choices=("constant", "multistep"))
    sp.add_argument("--eval-every", type=int, dest="eval_every")
    sp.add_argument("--hidden", help="comma-separated widths, e.g. 64,64,64")
    sp.add_argument("--clip", type=float)
    sp.add_argument("--mode", choices=train.MODES)
    sp.add_argument("--variance-reduction", dest="variance_reduction",
                    choices=train.DEVICES)
    sp.add_argument("--m-mc", type=int, dest="m_mc")
    sp.add_argument("--projection-steps", type=int, dest="projection_steps")
    sp.add_argument("--project-every", type=int, dest="project_every")
    sp.add_argument("--t-points", type=int, dest="t_points")
    sp.add_argument("--y-points", type=int, dest="y_points")
    sp.add_argument("--no-surfaces", action="store_true")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--out")


_COMMAND_METHOD = {
    "train": "pgdpo",
    "project": "ppgdpo",
    "bsde": "bsde",
    "benchmark": "benchmark-only",
}


def _config_from_args(args, method=None):
    keys = set(_SCHEMA) - {"method"}
    overrides = {k: getattr(args, k, None) for k in keys}
    if args.no_surfaces:
        overrides["surfaces"] = False
    overrides["method"] = method if method is not None else getattr(args, "method", None)
    return parse_config(args.config, overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pgdpo",
        description="Pontryagin-guided policy optimization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common_flags(sub.add_parser(
        "run", help="full pipeline for the configured method"), with_method=True)
    _add_common_flags(sub.add_parser(
        "train", help="policy warm-up training"))
    _add_common_flags(sub.add_parser(
        "project", help="warm-up training plus costate projection"))
    _add_common_flags(sub.add_parser(
        "bsde", help="terminal-matching value solver"))
    _add_common_flags(sub.add_parser(
        "benchmark", help="benchmark grid only"))
    ev = sub.add_parser("eval", help="score a saved checkpoint")
    _add_common_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    su = sub.add_parser("surface", help="export surfaces for a checkpoint")
    _add_common_flags(su)
    su.add_argument("--checkpoint", required=True)
    su.add_argument("--tau", type=float)

    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args, _COMMAND_METHOD.get(args.command))
    except CliError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2

    try:
        if args.command == "eval":
            doc = evaluate_checkpoint(cfg, args.checkpoint)
            print(json.dumps(doc, indent=2, sort_keys=True))
        elif args.command == "surface":
            for path in surface_checkpoint(cfg, args.checkpoint, args.tau):
                print(path)
        else:
            summary = run(cfg)
            best = (summary.get("report") or {}).get("methods", {})
            for name, row in sorted(best.items()):
                print("%s best iteration %d: rmse_total=%s" % (
                    name, row["best_iteration"], row["rmse_total"]))
            print("artifacts in %s (config %s)" % (summary["out"], summary["hash"]))
    except train.TrainError as e:
        print("error: %s" % e, file=sys.stderr)
        return 3
    except (CliError, market.MarketError, riccati.RiccatiError,
            evaluation.EvalError, costates.CostateError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
