"""Command-line drivers.

Every subcommand resolves its flags into a plain JSON config, validates it,
runs, and writes its outputs plus ``manifest.json`` into ``--out``. The
manifest holds the resolved config and a SHA-256 of every output, and
``shardhess rerun manifest.json --out DIR`` re-executes it. The output
directory itself is not part of the config, so a rerun into a fresh
directory reproduces identical bytes.

Oracle specs:

    quadratic:diag1..32              diag(1, ..., 32)
    quadratic:diag=1;2;5             explicit diagonal
    quadratic:random,dim=64,seed=0   (M + M^T)/2
    quadratic:blocks=4-6-5,coupling=0.3,seed=0
    rippled1d:b=0.05,omega=4,a=1
    rippled2d:b=0.05,omega=40
    mlp:layers=4-8-8-2,points=32,batches=4,seed=0
    path/to/oracle.json              any objective config

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure. On
failure a JSON error record is printed to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import blockdiag, costmodel, fdhvp, lanczos, optbench
from .objectives import ObjectiveError, RippledSpec, make_rippled, oracle_from_config
from .precision import PRECISIONS
from .sharded import CollectiveError, LayoutError, ShardedOperator, SimulatedCluster, partition

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- parsing

def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_oracle(spec: str) -> dict:
    """Objective config from a spec string or a JSON file path."""
    if spec.endswith(".json") or Path(spec).is_file():
        try:
            return json.loads(Path(spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read oracle config {spec!r}: {exc}") from None
    kind, _, rest = spec.partition(":")
    cfg: dict = {"kind": kind}
    if kind == "quadratic":
        m = re.fullmatch(r"diag(-?[\d.]+)\.\.(-?[\d.]+)", rest)
        if m:
            lo, hi = _number(m.group(1)), _number(m.group(2))
            cfg["diag"] = [float(x) for x in np.arange(lo, hi + 1)]
            return cfg
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            cfg[key] = True
        elif key in ("layers", "blocks"):
            cfg[key] = [int(x) for x in val.split("-")]
        elif key == "diag":
            cfg[key] = [float(x) for x in val.split(";")]
        else:
            try:
                cfg[key] = _number(val)
            except ValueError:
                raise ConfigError(f"bad value in oracle spec: {item!r}") from None
    return cfg


def build_oracle(cfg: dict):
    try:
        return oracle_from_config(cfg)
    except (ObjectiveError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid oracle: {exc}") from None


def evaluation_point(oracle, cfg: dict) -> np.ndarray:
    """Explicit ``theta`` if given, else MLP initial weights or zeros."""
    if cfg.get("theta") is not None:
        theta = np.asarray(cfg["theta"], dtype=np.float64)
        if theta.shape != (oracle.dim,):
            raise ConfigError(f"theta has {theta.size} entries, oracle dim is {oracle.dim}")
        return theta
    if hasattr(oracle, "initial_params"):
        return oracle.initial_params(int(cfg.get("seed", 0)))
    return np.zeros(oracle.dim)


def _reorth(text: str):
    if text in ("none", "full"):
        return text
    m = re.fullmatch(r"window:(\d+)", text)
    if not m:
        raise ConfigError(f"--reorth must be none, full or window:r, got {text!r}")
    return f"window:{int(m.group(1))}"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _theta_list(text):
    if text is None:
        return None
    return [float(x) for x in text.split(",")]


def _common_oracle(args) -> dict:
    oracle = parse_oracle(args.oracle)
    if getattr(args, "subsample", None) is not None:
        _require(0 < args.subsample <= 1, "--subsample must lie in (0, 1]")
        if args.subsample != 1:
            _require(oracle.get("kind") == "mlp", "--subsample applies to mlp oracles only")
            oracle["subsample"] = args.subsample
    return oracle


def resolve_config(args) -> dict:
    """Flags to a validated, JSON-serialisable config (no output paths)."""
    cmd = args.command
    cfg: dict = {"command": cmd, "schema_version": SCHEMA_VERSION, "seed": args.seed}
    if cmd in ("spectrum", "blockdiag", "epssweep"):
        cfg["oracle"] = _common_oracle(args)
        cfg["theta"] = _theta_list(args.theta)
        cfg["epsilon"] = args.epsilon
        _require(args.epsilon > 0, "--epsilon must be positive")
    if cmd in ("spectrum", "blockdiag"):
        _require(args.ranks >= 1, "--ranks must be at least 1")
        _require(args.workers >= 1, "--workers must be at least 1")
        cfg.update(hvp=args.hvp, ranks=args.ranks, workers=args.workers,
                   grad_precision=args.grad_precision)
    if cmd == "spectrum":
        _require(args.m >= 1 and args.s >= 1, "--m and --s must be at least 1")
        cfg.update(m=args.m, s=args.s, reorth=_reorth(args.reorth), precision=args.precision,
                   probe=args.probe, smoothing_sigma=args.sigma, grid_points=args.grid_points)
    elif cmd == "blockdiag":
        _require(args.s >= 1, "--s must be at least 1")
        cfg.update(s=args.s, blocks=args.blocks)
    elif cmd == "epssweep":
        _require(0 < args.eps_min < args.eps_max, "need 0 < --eps-min < --eps-max")
        _require(args.eps_count >= 2, "--eps-count must be at least 2")
        _require(args.sigma_f >= 0 and args.trials >= 1, "invalid noise settings")
        cfg.update(precision=args.precision, estimator=args.estimator, sigma_f=args.sigma_f,
                   trials=args.trials, eps_grid=[args.eps_min, args.eps_max, args.eps_count])
    elif cmd == "cost":
        try:
            profile = json.loads(Path(args.profile).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read profile {args.profile!r}: {exc}") from None
        _require(isinstance(profile, dict), "profile must be a JSON object")
        cfg["profile"] = profile
    elif cmd == "optbench":
        _require(args.steps >= 1, "--steps must be at least 1")
        _require(args.method in (*optbench.METHODS, "nesterov"), f"unknown method {args.method!r}")
        start = _theta_list(args.start)
        _require(len(start) == 2, "--start takes two coordinates")
        cfg.update(b=args.b, omega=args.omega, method=args.method, lr=args.lr,
                   steps=args.steps, start=start, curvature=args.curvature,
                   epsilon=args.epsilon, workers=args.workers)
        if args.method == "nesterov" and args.curvature == "fd_averaged":
            _require(args.epsilon is not None and args.epsilon > 0,
                     "fd_averaged curvature needs a positive --epsilon")
    return cfg


# ----------------------------------------------------------------- running

def _matvec(oracle, theta, cfg):
    """Operator and matching inner product for the chosen HVP path."""
    kind = cfg["hvp"]
    if kind == "exact":
        return (lambda v: oracle.hvp(theta, v)), None, None
    if kind == "fd":
        return (lambda v: fdhvp.hvp_central(oracle, theta, v, cfg["epsilon"],
                                            cfg["grad_precision"])), None, None
    if kind == "sharded":
        try:
            layout = partition(oracle.dim, cfg["ranks"])
        except (LayoutError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cluster = SimulatedCluster(layout, workers=cfg["workers"])
        op = ShardedOperator(oracle, theta, cfg["epsilon"], cluster, cfg["grad_precision"])
        return op, op.inner, cluster
    raise ConfigError(f"unknown --hvp {kind!r}")


def _csv_header(cfg) -> str:
    return "# config=" + json.dumps(cfg, sort_keys=True) + "\n"


def _with_header(path: Path, cfg) -> None:
    body = path.read_text()
    path.write_text(_csv_header(cfg) + body)


def run_spectrum(cfg, out: Path) -> list[str]:
    oracle = build_oracle(cfg["oracle"])
    theta = evaluation_point(oracle, cfg)
    _require(cfg["m"] <= oracle.dim, f"--m {cfg['m']} exceeds oracle dim {oracle.dim}")
    matvec, inner, cluster = _matvec(oracle, theta, cfg)
    dens = lanczos.slq_density(matvec, oracle.dim, cfg["m"], cfg["s"], probe=cfg["probe"],
                               smoothing_sigma=cfg["smoothing_sigma"], seed=cfg["seed"],
                               reorth=cfg["reorth"], storage=cfg["precision"], inner=inner)
    extra = {"config": cfg, "ghosts": lanczos.ghost_detect(
        dens.all_nodes, dens.all_weights, storage=cfg["precision"]).to_dict()}
    if cluster is not None:
        extra["collectives"] = cluster.collectives.snapshot()
    dens.write_json(out / "spectrum.json", extra)
    dens.write_stem_csv(out / "stem.csv")
    dens.write_density_csv(out / "density.csv", cfg["grid_points"])
    for name in ("stem.csv", "density.csv"):
        _with_header(out / name, cfg)
    return ["spectrum.json", "stem.csv", "density.csv"]


def run_blockdiag(cfg, out: Path) -> list[str]:
    oracle = build_oracle(cfg["oracle"])
    theta = evaluation_point(oracle, cfg)
    if cfg["blocks"] == "layers":
        part = blockdiag.BlockPartition.from_objective(oracle)
    else:
        try:
            n = int(cfg["blocks"])
            part = blockdiag.BlockPartition.equal(oracle.dim, n)
        except ValueError as exc:
            raise ConfigError(f"invalid --blocks: {exc}") from None
    matvec, _, _ = _matvec(oracle, theta, cfg)
    stats = blockdiag.block_diag_stats(matvec, part,
                                       blockdiag.sample_probes(oracle.dim, cfg["s"], cfg["seed"]),
                                       None if cfg["hvp"] == "exact" else cfg["epsilon"])
    stats.write_json(out / "blockdiag.json", {"config": cfg,
                                              "boundaries": list(part.boundaries)})
    stats.write_csv(out / "blockdiag.csv")
    _with_header(out / "blockdiag.csv", cfg)
    return ["blockdiag.json", "blockdiag.csv"]


def run_epssweep(cfg, out: Path) -> list[str]:
    oracle = build_oracle(cfg["oracle"])
    theta = evaluation_point(oracle, cfg)
    lo, hi, n = cfg["eps_grid"]
    v = np.random.default_rng(cfg["seed"]).standard_normal(oracle.dim)
    res = fdhvp.fd_error_sweep(oracle, theta, v, np.logspace(math.log10(lo), math.log10(hi), n),
                               cfg["precision"], cfg["sigma_f"], estimator=cfg["estimator"],
                               trials=cfg["trials"], seed=cfg["seed"])
    res.to_csv(out / "sweep.csv")
    _with_header(out / "sweep.csv", cfg)
    with open(out / "sweep.json", "w") as fh:
        json.dump({"config": cfg, **res.summary()}, fh, indent=2)
    return ["sweep.json", "sweep.csv"]


_GRID_KEYS = ("ranks", "windows", "probes", "steps", "t_post", "k_vec", "bytes_per_param")


def run_cost(cfg, out: Path) -> list[str]:
    prof = dict(cfg["profile"])
    grid = {k: prof.pop(k) for k in _GRID_KEYS if k in prof}
    dp = prof.pop("dp_vs_fsdp", None)
    measured = prof.pop("step_times", None)
    try:
        params = costmodel.CostParams.from_dict(prof)
        rows = costmodel.cost_table(params, **{k: tuple(v) if isinstance(v, list) else v
                                               for k, v in grid.items()})
        result = {"config": cfg, "params": params.to_dict()}
        if dp is not None:
            result["dp_vs_fsdp"] = costmodel.dp_vs_fsdp(**dp).to_dict()
        if measured is not None:
            result["step_times"] = costmodel.compare_step_times(**measured).to_dict()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid cost profile: {exc}") from None
    costmodel.write_table(rows, out / "cost.json", out / "cost.csv", result)
    _with_header(out / "cost.csv", cfg)
    return ["cost.json", "cost.csv"]


def run_optbench(cfg, out: Path) -> list[str]:
    dims = 2
    try:
        oracle = make_rippled(RippledSpec(b=cfg["b"], omega=cfg["omega"], dims=dims))
    except (ObjectiveError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    extra = {"config": cfg}
    if cfg["method"] == "nesterov":
        mode = "pointwise" if cfg["curvature"] == "pointwise" else ("fd_averaged", cfg["epsilon"])
        traj = optbench.adaptive_nesterov(oracle, mode, cfg["steps"], cfg["start"])
    elif cfg["lr"] is not None:
        _require(cfg["lr"] > 0, "--lr must be positive")
        traj = optbench.run_optimizer(oracle, cfg["method"], cfg["lr"], cfg["steps"],
                                      cfg["start"], cfg["seed"])
    else:
        lr, traj = optbench.grid_search_lr(oracle, cfg["method"], steps=cfg["steps"],
                                           start=cfg["start"], workers=cfg["workers"])
        extra["best_lr"] = lr
        extra["lr_grid"] = [float(x) for x in optbench.DEFAULT_LR_GRID]
    traj.to_csv(out / "trajectory.csv")
    _with_header(out / "trajectory.csv", cfg)
    traj.write_json(out / "summary.json", extra)
    return ["summary.json", "trajectory.csv"]


RUNNERS = {"spectrum": run_spectrum, "blockdiag": run_blockdiag, "epssweep": run_epssweep,
           "cost": run_cost, "optbench": run_optbench}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def execute(cfg: dict, out: Path) -> dict:
    """Run a resolved config into ``out`` and write its manifest."""
    if cfg.get("command") not in RUNNERS:
        raise ConfigError(f"unknown command {cfg.get('command')!r}")
    # canonical key order, so a config reloaded from a manifest serialises identically
    cfg = json.loads(json.dumps(cfg, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    files = RUNNERS[cfg["command"]](cfg, out)
    manifest = {"config": cfg, "outputs": {f: _sha256(out / f) for f in files}}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def rerun(manifest_path: Path, out: Path) -> dict:
    try:
        old = json.loads(Path(manifest_path).read_text())
        cfg = old["config"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read manifest {manifest_path}: {exc}") from None
    new = execute(cfg, out)
    old_out = old.get("outputs", {})
    return {"identical": old_out == new["outputs"],
            "files": {f: old_out.get(f) == h for f, h in new["outputs"].items()}}


# --------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardhess", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, oracle=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if oracle:
            sp.add_argument("--oracle", required=True, help="oracle spec or JSON file")
            sp.add_argument("--theta", help="comma-separated evaluation point")
            sp.add_argument("--epsilon", type=float, default=1e-4)
            sp.add_argument("--subsample", type=float, help="fraction of mlp batches to keep")

    def hvp_flags(sp):
        sp.add_argument("--hvp", choices=("exact", "fd", "sharded"), default="fd")
        sp.add_argument("--ranks", type=int, default=1)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--grad-precision", choices=PRECISIONS, default="fp64",
                        help="precision of gradient evaluations")

    sp = sub.add_parser("spectrum", help="SLQ spectral density")
    common(sp)
    hvp_flags(sp)
    sp.add_argument("--m", type=int, default=30, help="Lanczos steps")
    sp.add_argument("--s", type=int, default=1, help="probe count")
    sp.add_argument("--reorth", default="full", help="none, full or window:r")
    sp.add_argument("--precision", choices=PRECISIONS, default="fp64",
                    help="storage precision of Lanczos vectors")
    sp.add_argument("--probe", choices=("gaussian", "rademacher"), default="gaussian")
    sp.add_argument("--sigma", type=float, help="smoothing bandwidth (default 1%% of width)")
    sp.add_argument("--grid-points", type=int, default=1001)

    sp = sub.add_parser("blockdiag", help="block-diagonal Hessian test")
    common(sp)
    hvp_flags(sp)
    sp.add_argument("--s", type=int, default=10, help="probe count")
    sp.add_argument("--blocks", default="layers", help="'layers' or a number of equal blocks")

    sp = sub.add_parser("epssweep", help="finite-difference error vs step size")
    common(sp)
    sp.add_argument("--precision", choices=PRECISIONS, default="fp64")
    sp.add_argument("--estimator", choices=("hvp", "second_difference"), default="hvp")
    sp.add_argument("--sigma-f", type=float, default=0.0, help="injected noise std")
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--eps-min", type=float, default=1e-8)
    sp.add_argument("--eps-max", type=float, default=1.0)
    sp.add_argument("--eps-count", type=int, default=41)

    sp = sub.add_parser("cost", help="cost-model table from a JSON hardware profile")
    common(sp, oracle=False)
    sp.add_argument("--profile", required=True)

    sp = sub.add_parser("optbench", help="optimizers on the rippled surface")
    common(sp, oracle=False)
    sp.add_argument("--b", type=float, default=0.05)
    sp.add_argument("--omega", type=float, default=40.0)
    sp.add_argument("--method", default="gd", help="gd, momentum, adam or nesterov")
    sp.add_argument("--lr", type=float, help="fixed learning rate (default: grid search)")
    sp.add_argument("--steps", type=int, default=optbench.DEFAULT_STEPS)
    sp.add_argument("--start", default="2,2")
    sp.add_argument("--curvature", choices=("pointwise", "fd_averaged"), default="pointwise")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("rerun", help="re-execute a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    return p


def _fail(code: int, exc: BaseException) -> int:
    kind = "config" if code == EXIT_CONFIG else "numerical"
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}))
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "rerun":
            print(json.dumps(rerun(Path(args.manifest), Path(args.out))))
            return EXIT_OK
        cfg = resolve_config(args)
        execute(cfg, Path(args.out))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (FloatingPointError, CollectiveError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
