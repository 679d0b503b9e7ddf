"""Command-line entry point: ``dba <command> [flags]``.

Exit codes: 0 success, 1 a check or run failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, config, oracles
from .attention import AttentionConfig, DbaParams, projections
from .errors import CheckpointError, ContractError, DbaError, ParameterError
from .numeric import dump_text, load_text

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_MAX = 16
GRAD_TOL = 1e-5

log = logging.getLogger("dba")


class UsageError(Exception):
    pass


# --- shared flags ------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, n_help="sequence length(s), comma separated"):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--mechanism", help="attention mechanism")
    p.add_argument("--n", help=n_help)
    p.add_argument("--d", type=int, help="hidden dimension")
    p.add_argument("--dp", dest="d_p", type=int, help="compressed sequence length d_p")
    p.add_argument("--din", dest="d_in", type=int, help="compressed hidden dimension d_in")
    p.add_argument("--heads", type=int)
    p.add_argument("--seed", help="integer seed (falls back to $DBA_SEED, then 0)")
    p.add_argument("--reps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--task")
    p.add_argument("--out", dest="out_path", help="output path")


def run_config(args) -> config.RunConfig:
    base = config.load(args.config) if args.config else config.RunConfig()
    flags = {k: getattr(args, k) for k in ("mechanism", "n", "d", "d_p", "d_in", "heads",
                                           "reps", "epochs", "task", "out_path")
             if getattr(args, k, None) is not None}
    seed = getattr(args, "seed", None)
    if seed is not None and ".." not in str(seed):
        flags["seed"] = seed
    return base.merged(config.coerce(flags))


def seed_list(args, cfg: config.RunConfig) -> list[int]:
    """``--seed 3`` or an inclusive range ``--seed 1..10``."""
    raw = getattr(args, "seed", None)
    if raw is not None and ".." in str(raw):
        lo, hi = str(raw).split("..", 1)
        try:
            lo, hi = int(lo), int(hi)
        except ValueError as exc:
            raise UsageError(f"bad seed range {raw!r}") from exc
        if hi < lo:
            raise UsageError(f"empty seed range {raw!r}")
        return list(range(lo, hi + 1))
    return [cfg.resolved_seed()]


# --- bench -------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = run_config(args)
    mechanisms = [m for m in (args.mechanisms or cfg.get("mechanism", "vanilla,dba")).split(",") if m]
    ns = sorted(set(cfg.get("n", (256, 512, 1024, 2048, 4096))))
    if len(ns) < 4 or ns[-1] < 8 * ns[0]:
        raise UsageError("need ≥ 4 lengths for slope fit (spanning ≥ 8x in n)")
    template = AttentionConfig(n=ns[0], d=cfg.get("d", 64), d_p=cfg.get("d_p", 16),
                               d_in=cfg.get("d_in", 24), heads=cfg.get("heads", 1),
                               mechanism=mechanisms[0])
    for m in mechanisms:
        template.replace(mechanism=m)  # validates each name
    reps = cfg.get("reps", 10)
    if reps < 5:
        raise UsageError(f"--reps must be >= 5, got {reps}")
    records = bench.run_sweep(mechanisms, ns, template, reps=reps, seed=cfg.resolved_seed())
    out = Path(cfg.get("out_path", "bench.csv"))
    bench.write_csv(records, out)
    fits = bench.fit_scaling(records)
    flop_fits = bench.fit_scaling(records, metric="flops")
    print(f"wrote {len(records)} rows to {out}")
    for mech, fit in fits.items():
        print(f"{mech:>28s}  wall slope {fit.slope:6.3f} (r2 {fit.r2:.3f})  "
              f"flops slope {flop_fits[mech].slope:6.3f}")
    ok = True
    if "vanilla" in mechanisms:
        for target in mechanisms:
            if target == "vanilla":
                continue
            sp = bench.speedups(records, "vanilla", target)
            print(f"speedup {target} vs vanilla: "
                  + ", ".join(f"n={n}: {s:.2f}x" for n, s in sp.items()))
            vals = list(sp.values())
            if not all(b >= a for a, b in zip(vals, vals[1:])):
                print(f"note: speedup of {target} is not monotone in n on this run")
    for mech, mono in bench.timer_monotone(records).items():
        if not mono:
            print(f"SANITY FAIL: wall time of {mech} does not grow with n")
            ok = False
    for mech in mechanisms:
        c = template.replace(mechanism=mech)
        if c.is_dba:
            f = [bench.count_flops(c.replace(n=k)) for k in (ns[0], 2 * ns[0], 3 * ns[0])]
            if f[2] - 2 * f[1] + f[0] != 0:
                print(f"SANITY FAIL: flop count of {mech} is not affine in n")
                ok = False
    if args.svg:
        Path(args.svg).write_text(bench.render_svg(records, fits))
        print(f"wrote {args.svg}")
    return EXIT_OK if ok else EXIT_FAIL


# --- validate ----------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = run_config(args)
    if args.trials < oracles.MIN_JL_TRIALS:
        raise UsageError(f"--trials must be >= {oracles.MIN_JL_TRIALS}, got {args.trials}")
    seed = cfg.resolved_seed()
    eps_grid = [args.epsilon] if args.epsilon is not None else [0.3, 0.5, 0.7]
    dp_grid = [cfg.d_p] if cfg.d_p is not None else [8, 16]
    for e in eps_grid:
        if not 0.0 < e < 1.0:
            raise UsageError(f"--epsilon must lie in (0, 1), got {e}")
    for dp in dp_grid:
        if dp < 2:
            raise UsageError(f"--dp must be >= 2, got {dp}")
    log_path = Path(cfg.get("out_path", "validate.jsonl"))
    failed = []

    def report(rec):
        oracles.append_report(log_path, rec)
        if not rec["pass"]:
            failed.append(rec)

    for e in eps_grid:
        for dp in dp_grid:
            print(f"d_in minimum for d_p={dp}, epsilon={e}: {oracles.jl_minimum_dim(dp, e)}")
    d = cfg.get("d", 64)
    for rep in _jl_reports(d, eps_grid, dp_grid, args, seed):
        rec = rep.record()
        print(f"jl  eps={rep.epsilon} d_p={rep.d_p} d_in={rep.d_in}: "
              f"{rep.failures}/{rep.trials} failures, bound {rep.bound:.3g}"
              f"{' (vacuous)' if rep.vacuous else ''} -> {'pass' if rep.passed else 'FAIL'}")
        report(rec)
    n_r, d_r = 24, 12
    rep_ok = True
    for r in range(1, min(n_r, d_r) + 1):
        rep = oracles.lowrank_representability_check(n_r, d_r, r, seed)
        report(rep.record())
        rep_ok &= rep.passed
    print(f"representability n={n_r} d={d_r} r=1..{min(n_r, d_r)}: {'pass' if rep_ok else 'FAIL'}")
    gaps = [oracles.reduction_identity_gap(16, 16, seed + s) for s in range(20)]
    worst = max(gaps)
    red = {"check": "reduction_identity", "params": {"n": 16, "d": 16, "seeds": 20},
           "trials": 20, "failures": sum(g > 1e-10 for g in gaps), "bound": 1e-10,
           "pass": worst <= 1e-10}
    report(red)
    print(f"reduction identity max-abs gap {worst:.3g}: {'pass' if red['pass'] else 'FAIL'}")
    print(f"appended records to {log_path}")
    if failed:
        print(f"{len(failed)} check(s) failed; first failing record:")
        print(json.dumps(failed[0]))
        return EXIT_FAIL
    return EXIT_OK


def _jl_reports(d, eps_grid, dp_grid, args, seed):
    out = []
    for e in eps_grid:
        for dp in dp_grid:
            m = oracles.jl_minimum_dim(dp, e)
            for d_in in (m, 2 * m):
                variance = 1.0 / d_in if args.jl_variance == "d_in" else None
                out.append(oracles.jl_monte_carlo(d, dp, d_in, e, args.trials, seed,
                                                  variance=variance,
                                                  reference=args.jl_reference))
    return out


# --- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = run_config(args)
    n_vals = cfg.get("n", (6,))
    if len(n_vals) != 1:
        raise UsageError("gradcheck takes a single --n")
    n, d = n_vals[0], cfg.get("d", 8)
    if n > GRADCHECK_MAX or d > GRADCHECK_MAX:
        raise UsageError(f"gradcheck needs n <= {GRADCHECK_MAX} and d <= {GRADCHECK_MAX}, "
                         f"got n={n}, d={d}")
    acfg = AttentionConfig(n=n, d=d, d_p=cfg.get("d_p", min(3, n)), d_in=cfg.get("d_in", min(4, d)),
                           heads=cfg.get("heads", 2 if d % 2 == 0 else 1),
                           mechanism=cfg.get("mechanism", "dba"))
    if not acfg.is_dba:
        raise UsageError("gradcheck covers DBA mechanisms only")
    ok = True
    for seed in seed_list(args, cfg):
        for kind in ("self", "cross"):
            rep = oracles.gradcheck_layer(acfg, seed, kind=kind)
            print(f"{kind} attention, seed {seed}")
            for name, value in rep.discrepancies.items():
                flag = "" if value <= GRAD_TOL else "  FAIL"
                print(f"  {name:<10s} {value:.3e}{flag}")
            ok &= rep.passed(GRAD_TOL)
    print("all discrepancies <= 1e-5" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# --- train / eval ------------------------------------------------------------

def _task_spec(args, cfg, seed):
    from .tasks import TaskSpec
    kind = cfg.get("task", "majority")
    kind = {"majority-token": "majority"}.get(kind, kind)
    n_vals = cfg.get("n", None)
    defaults = {"majority": (48, 8), "sparse-recall": (64, 8), "cross-match": (8, 16)}
    if kind not in defaults:
        raise UsageError(f"unknown task {kind!r}")
    n = n_vals[0] if n_vals else defaults[kind][0]
    vocab = args.vocab or defaults[kind][1]
    return TaskSpec(kind=kind, n=n, n2=args.n2, vocab=vocab, train_size=args.train_size,
                    val_size=args.val_size, seed=seed)


def cmd_train(args) -> int:
    from .model import default_config
    from .train import train
    cfg = run_config(args)
    seed = cfg.resolved_seed()
    task = _task_spec(args, cfg, seed)
    over = {k: v for k, v in (("d", cfg.d), ("d_p", cfg.d_p), ("d_in", cfg.d_in),
                              ("heads", cfg.heads)) if v is not None}
    if args.depth:
        over["depth"] = args.depth
    if args.share_z:
        over["share_z"] = True
    model = default_config(task, cfg.get("mechanism", "dba"), **over)
    out = Path(cfg.get("out_path", "run"))
    rep = train(model, task, epochs=cfg.get("epochs", 30), seed=seed, out_dir=out)
    print(f"mechanism {rep.mechanism}  task {task.kind}  epochs {rep.epochs}")
    print(f"final train loss {rep.final_train_loss:.5f}  train acc {rep.train_accuracy:.4f}  "
          f"val acc {rep.val_accuracy:.4f}")
    print(f"parameters {rep.param_count} (attention {rep.attention_param_count})  "
          f"wall {rep.wall_seconds:.1f}s")
    print(f"checkpoint {rep.checkpoint}, log {out / 'log.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .tasks import TaskSpec, gen_task
    from .train import accuracy, load_model, variable_length_eval
    path = Path(args.checkpoint)
    if not path.exists():
        print(f"checkpoint not found: {path}", file=sys.stderr)
        return EXIT_FAIL
    params, model, meta = load_model(path)
    task = TaskSpec(**meta["task"])
    if args.lengths:
        lengths = config._int_list(args.lengths)
        for n, acc in variable_length_eval(path, lengths).items():
            print(f"n={n}: accuracy {acc:.4f}")
        return EXIT_OK
    train_set, val_set = gen_task(task)
    data = train_set if args.split == "train" else val_set
    print(f"{args.split} accuracy {accuracy(params, model, data):.4f}")
    return EXIT_OK


# --- projection dumps --------------------------------------------------------

def layer_from_checkpoint(path, layer: int = 0) -> tuple[DbaParams, AttentionConfig]:
    from .train import load_model
    params, model, _ = load_model(path)
    if not model.mechanism.startswith("dba") or model.cross:
        raise ContractError("projection dumps need a DBA self-attention model")
    named = dict(params)
    if model.share_z:
        named[f"l{layer}.attn.z"] = params["z"]
    try:
        p = DbaParams.from_named(named, f"l{layer}.attn.")
    except KeyError as exc:
        raise CheckpointError(f"layer {layer} missing tensor {exc}") from exc
    return p, model.attention(model.n)


def cmd_dump_projections(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        print(f"checkpoint not found: {path}", file=sys.stderr)
        return EXIT_FAIL
    p, acfg = layer_from_checkpoint(path, args.layer)
    out = Path(args.out_path or "projections")
    out.mkdir(parents=True, exist_ok=True)
    w_r = []
    for i, name in enumerate(args.inputs):
        x = load_text(Path(name).read_text())
        if x.ndim != 2 or x.shape[1] != acfg.d:
            raise UsageError(f"{name}: expected an n x {acfg.d} tensor, got {x.shape}")
        proj = projections(x, p, acfg.replace(n=max(x.shape[0], acfg.d_p)))
        for field, value in (("w_r", proj.w_r), ("w_c", proj.w_c),
                             ("w_r_rec", proj.w_r_rec), ("w_c_rec", proj.w_c_rec)):
            (out / f"input{i}_{field}.txt").write_text(dump_text(value))
        w_r.append(proj.w_r)
        print(f"input {i} ({name}): wrote {out}/input{i}_{{w_r,w_c,w_r_rec,w_c_rec}}.txt")
    if len(w_r) >= 2 and w_r[0].shape == w_r[1].shape:
        print(f"||W_r(input0) - W_r(input1)||_F = {float(np.linalg.norm(w_r[0] - w_r[1])):.6g}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="timing sweep, slope fit, CSV/SVG output")
    _common(p)
    p.add_argument("--mechanisms", help="comma-separated mechanisms (default vanilla,dba)")
    p.add_argument("--svg", help="also write a log-log plot here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="random-projection, rank and reduction checks")
    _common(p)
    p.add_argument("--epsilon", type=float, help="restrict the grid to one epsilon")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--jl-variance", choices=("d", "d_in"), default="d",
                   help="entry variance of R is 1/d (default) or 1/d_in")
    p.add_argument("--jl-reference", choices=("product", "factors"), default="product",
                   help="error scale ||AB||_F (default) or ||A||_F ||B||_F")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gradcheck", help="backward vs finite differences")
    _common(p, n_help="sequence length (<= 16)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a toy classifier")
    _common(p, n_help="sequence length")
    p.add_argument("--vocab", type=int)
    p.add_argument("--n2", type=int, default=6, help="key-set length for cross-match")
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--val-size", type=int, default=500)
    p.add_argument("--depth", type=int)
    p.add_argument("--share-z", action="store_true", help="one Z shared by all layers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--lengths", help="comma-separated lengths for variable-length eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-projections", help="write W_r, W_c, W_r', W_c' for inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", nargs="+", required=True, help="tensor text dumps (n x d)")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", dest="out_path")
    p.set_defaults(func=cmd_dump_projections)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dba {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, ValueError) as exc:
        print(f"dba {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ContractError, DbaError, OSError) as exc:
        print(f"dba {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
