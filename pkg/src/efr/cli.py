"""Command-line entry point.

Subcommands: ``generate`` (random instance sets), ``train``, ``solve``,
``eval``, ``ablate`` (train+eval variant sweep), ``gradcheck``, ``parse``
(TSPLib/CVRPLib conversion).  Exit codes: 0 success, 1 usage error, 2
runtime error.

Configuration comes from flags and/or a flat ``key = value`` config file
(``--config``); flags override the file.  Keys mirror the ModelConfig and
TrainConfig field names (they are disjoint, so the file stays flat).  The
environment variable ``EFR_SEED`` overrides every seed flag for the run.
Every run writes its resolved configuration into its report or log so a
result can be reproduced from the artifact alone.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .errors import (CheckpointError, ConfigurationError, DataError,
                     FeasibilityError, ParseError, TrainingError)
from .instances import ProblemInstance, generate_atsp_instance, generate_instance
from .libio import (load_instances, load_library_file, save_instances,
                    write_report)
from .model import ABLATION_VARIANTS, ModelConfig, ablate, build_policy
from .training import (TrainConfig, gradcheck, load_checkpoint, train)
from .evaluate import (REFERENCES, EvalResult, evaluate, run_ablation,
                       write_eval_report)
from . import figures

_RUNTIME_ERRORS = (ConfigurationError, DataError, ParseError, FeasibilityError,
                   CheckpointError, TrainingError, OSError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems as exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files (flat key = value, flags override)
# ---------------------------------------------------------------------------

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("none", "null"):
        return None
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment; keys use underscores."""
    out = {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
            raise ParseError(f"{path}:{lineno}: unknown config key {key!r}")
        parsed = _parse_scalar(value)
        if key == "lr_milestones" and parsed is not None:
            if isinstance(parsed, int):
                parsed = [parsed]
            else:
                parsed = [int(v) for v in str(parsed).split(",")]
        out[key] = parsed
    return out


def _split_config(file_values: dict, flag_values: dict):
    """Merge config-file values with explicitly-given flags (flags win) and
    route each key to the matching config dataclass."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    model_kwargs = {k: v for k, v in merged.items() if k in _MODEL_FIELDS}
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_FIELDS}
    return model_kwargs, train_kwargs


def _apply_env_seed(args):
    raw = os.environ.get("EFR_SEED")
    if raw is None or not hasattr(args, "seed"):
        return
    try:
        args.seed = int(raw)
    except ValueError:
        raise UsageError(f"EFR_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

_LIBRARY_SUFFIXES = (".tsp", ".atsp", ".vrp")
_CONTAINER_SUFFIXES = (".json", ".jsonl")


def _load_instance_arg(path) -> List[ProblemInstance]:
    """Instance file or directory: efr-inst-1 containers and/or library files."""
    p = Path(path)
    if p.is_dir():
        files = sorted(x for x in p.iterdir()
                       if x.suffix.lower() in _LIBRARY_SUFFIXES + _CONTAINER_SUFFIXES)
        if not files:
            raise DataError(f"no instance files found in directory {p}")
    elif p.exists():
        files = [p]
    else:
        raise DataError(f"instance path not found: {p}")
    out: List[ProblemInstance] = []
    for f in files:
        if f.suffix.lower() in _LIBRARY_SUFFIXES:
            inst, _meta = load_library_file(f)
            out.append(inst)
        else:
            out.extend(load_instances(f))
    return out


def _load_reference_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"reference length file not found: {p}")
    data = json.loads(p.read_text())
    if not isinstance(data, dict):
        raise DataError("reference length file must be a JSON object "
                        "{instance_id: length}")
    return {str(k): float(v) for k, v in data.items()}


def _print_summary(result: EvalResult):
    s = result.summary()
    gap = "-" if s["mean_gap"] is None else f"{s['mean_gap']:.4f}%"
    print(f"instances      {s['n_instances']}")
    print(f"n_aug          {s['n_aug']}")
    print(f"reference      {s['reference']}")
    print(f"mean length    {s['mean_length']:.6f}")
    print(f"mean gap       {gap}")
    print(f"feasible       {100.0 * s['feasible_fraction']:.1f}%")
    print(f"model time     {s['model_seconds']:.2f}s "
          f"(+{s['reference_seconds']:.2f}s reference)")


def _announce(paths):
    for p in paths:
        print(f"wrote {p}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    out = Path(args.out)
    insts = []
    for i in range(args.count):
        seed = args.seed + i
        if args.kind == "atsp":
            insts.append(generate_atsp_instance(args.n, seed=seed))
        else:
            insts.append(generate_instance(args.kind, args.n, seed=seed,
                                           distribution=args.distribution))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_instances(insts, out)
    print(json.dumps({"command": "generate", "kind": args.kind, "n": args.n,
                      "count": args.count, "distribution": args.distribution,
                      "seed": args.seed, "out": str(out)}))
    return 0


def _cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flag_values = {
        "kind": args.kind, "n": args.n, "distribution": args.distribution,
        "epochs": args.epochs, "instances_per_epoch": args.instances_per_epoch,
        "batch_size": args.batch_size, "n_starts": args.n_starts,
        "lr": args.lr, "grad_clip": args.grad_clip, "seed": args.seed,
        "variant": args.variant, "embed_dim": args.embed_dim,
        "num_heads": args.num_heads, "k_neighbors": args.k_neighbors,
    }
    model_kwargs, train_kwargs = _split_config(file_values, flag_values)
    model_config = ModelConfig(**model_kwargs)
    if args.ablate != "full":
        model_config = ablate(model_config, args.ablate)
    train_config = TrainConfig(**train_kwargs)

    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".log.jsonl")
    _policy, history = train(model_config, train_config, checkpoint_path=ckpt,
                             log_path=log_path, resume=args.resume)
    print(f"trained {train_config.epochs} epochs "
          f"-> {ckpt} (log: {log_path})")
    if history:
        print(f"final mean length {history[-1].mean_length:.6f}")
    if not args.no_figures:
        _announce(figures.render_training_figures(
            [h.to_record() for h in history], log_path.with_suffix("")))
    return 0


def _solve_like(args, command: str, default_reference: str) -> int:
    policy, model_config, extra = load_checkpoint(args.checkpoint)
    instances = _load_instance_arg(args.instances)
    reference = args.reference or default_reference
    reference_lengths = (_load_reference_file(args.ref_file)
                         if args.ref_file else None)
    result = evaluate(policy, instances, n_aug=args.aug, reference=reference,
                      reference_lengths=reference_lengths, seed=args.seed,
                      n_starts=args.n_starts, workers=args.workers)
    config_record = {
        "command": command,
        "checkpoint": str(args.checkpoint),
        "model": model_config.to_dict(),
        "train": extra.get("train_config"),
        "n_aug": args.aug, "n_starts": args.n_starts, "seed": args.seed,
        "reference": reference, "workers": args.workers,
    }
    report = Path(args.report) if args.report else None
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        write_eval_report(report, result, config_record=config_record)
        print(f"wrote {report}")
        if not args.no_figures:
            _announce(figures.render_report_figures(
                result.reports, instances, report.with_suffix("")))
    _print_summary(result)
    return 0


def _cmd_solve(args) -> int:
    if args.report is None:
        args.report = str(Path(args.instances).with_suffix("")) + "-solutions.jsonl"
    return _solve_like(args, "solve", default_reference="none")


def _cmd_eval(args) -> int:
    return _solve_like(args, "eval", default_reference="exact")


def _cmd_ablate(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flag_values = {
        "kind": args.kind, "n": args.n, "epochs": args.epochs,
        "instances_per_epoch": args.instances_per_epoch,
        "batch_size": args.batch_size, "lr": args.lr,
        "embed_dim": args.embed_dim, "num_heads": args.num_heads,
        "k_neighbors": args.k_neighbors,
    }
    model_kwargs, train_kwargs = _split_config(file_values, flag_values)
    model_config = ModelConfig(**model_kwargs)
    train_config = TrainConfig(**train_kwargs)
    eval_instances = _load_instance_arg(args.eval_set)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = [v.strip() for v in args.variants.split(",")]
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from "
                             f"{', '.join(ABLATION_VARIANTS)}")

    out_dir = Path(args.out_dir)
    runs = run_ablation(model_config, train_config, eval_instances,
                        variants=variants, seeds=seeds, out_dir=out_dir,
                        reference=args.reference, n_aug=args.aug,
                        workers=args.workers,
                        progress=lambda r: print(
                            f"{r.variant:>18s} seed {r.seed}: mean gap "
                            f"{'-' if r.mean_gap is None else f'{r.mean_gap:.4f}%'}"))
    report = out_dir / "ablation.jsonl"
    with report.open("w") as fh:
        fh.write(json.dumps({"record": "config",
                             "model": model_config.to_dict(),
                             "train": train_config.to_dict(),
                             "variants": variants, "seeds": seeds,
                             "reference": args.reference,
                             "n_aug": args.aug}) + "\n")
        for r in runs:
            fh.write(json.dumps(r.to_record()) + "\n")
    print(f"wrote {report}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    ok = True
    for seed in range(args.seeds):
        rep = gradcheck(kind=args.kind, n=args.n, seed=seed, coord_tol=args.tol)
        passed = rep.passed(args.tol)
        ok = ok and passed
        worst = max(worst, rep.worst_norm_rel_err)
        print(f"seed {seed}: max relative error {rep.worst_norm_rel_err:.3e} "
              f"({rep.worst_array}), healthy coords "
              f"{100.0 * rep.healthy_coord_fraction:.2f}% "
              f"[{'PASS' if passed else 'FAIL'}]")
    print(f"max relative error: {worst:.3e} (tolerance {args.tol:.0e})")
    if not ok:
        raise TrainingError("gradient check failed")
    return 0


def _cmd_parse(args) -> int:
    instances = []
    for path in args.inputs:
        inst, meta = load_library_file(path)
        instances.append(inst)
        print(f"{meta.name}: {inst.kind.value} n={inst.n} "
              f"({meta.edge_weight_type}, scale {meta.scale:g})")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_instances(instances, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="efr",
                     description="routing-problem solver toolkit "
                                 "(edge-input transformer policy)")
    parser.add_argument("--version", action="version", version=f"efr {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", help="write a random instance set")
    p.add_argument("--kind", choices=("tsp", "cvrp", "atsp"), required=True)
    p.add_argument("--n", type=int, required=True,
                   help="nodes (TSP/ATSP) or customers (CVRP)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--distribution",
                   choices=("uniform", "explosion", "implosion", "grid"),
                   default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .jsonl (efr-inst-1)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--kind", choices=("tsp", "cvrp", "atsp"))
    p.add_argument("--n", type=int)
    p.add_argument("--distribution",
                   choices=("uniform", "explosion", "implosion", "grid"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--instances-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-starts", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("edge_input", "node_input"))
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--ablate", choices=ABLATION_VARIANTS, default="full",
                   help="train with one module disabled")
    p.add_argument("--out", required=True, help="checkpoint path (.pt)")
    p.add_argument("--log", help="JSONL progress log (default: next to --out)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_train)

    def add_solve_flags(p, reference_default_text):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--aug", type=int, default=1, help="augmentation count")
        p.add_argument("--n-starts", type=int)
        p.add_argument("--reference", choices=REFERENCES,
                       help=f"gap reference (default: {reference_default_text})")
        p.add_argument("--ref-file",
                       help="JSON {instance_id: length} for --reference file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("solve", help="solve instances and write routes")
    p.add_argument("--instances", required=True,
                   help="instance file or directory (efr-inst-1 or TSPLib/CVRPLib)")
    add_solve_flags(p, "none")
    p.add_argument("--report", help="output JSONL "
                                    "(default: <instances>-solutions.jsonl)")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="aggregate gap evaluation on a set")
    p.add_argument("--set", dest="instances", required=True,
                   help="instance file or directory")
    add_solve_flags(p, "exact")
    p.add_argument("--report", help="optional output JSONL")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train+eval a sweep of model variants")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("tsp", "cvrp", "atsp"))
    p.add_argument("--n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--instances-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--variants", default="full,no_node_encoder,"
                                         "no_graph_encoder,no_gcn")
    p.add_argument("--seeds", default="0")
    p.add_argument("--eval-set", required=True, help="held-out instance file")
    p.add_argument("--reference", choices=REFERENCES, default="exact")
    p.add_argument("--aug", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient self-test (tiny config)")
    p.add_argument("--kind", choices=("tsp", "cvrp", "atsp"), default="tsp")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("parse", help="convert TSPLib/CVRPLib files to efr-inst-1")
    p.add_argument("inputs", nargs="+", metavar="FILE")
    p.add_argument("--out", required=True, help="output .jsonl")
    p.set_defaults(func=_cmd_parse)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            print("error: a subcommand is required", file=sys.stderr)
            return 1
        _apply_env_seed(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
