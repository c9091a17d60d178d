"""Batch evaluation: solve instance sets and aggregate gaps against a reference.

Reference options
-----------------
``exact``    Held-Karp optimum (TSP/ATSP, n <= 16 only).
``two_opt``  Classic-heuristic reference (nearest-neighbor + 2-opt for TSP,
             nearest-neighbor for ATSP, greedy sweep + 2-opt for CVRP).
``file``     Caller-supplied lengths keyed by instance id.
``none``     Lengths only; gap fields stay null.

The aggregate gap is the mean of per-instance gaps (not the gap of mean
lengths); this choice is recorded in the summary record.  Reported model
wall-clock excludes reference-solver time.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import HELD_KARP_MAX_N, held_karp, reference_tour_length
from .errors import ConfigurationError, DataError, FeasibilityError
from .instances import (ProblemInstance, ProblemKind, SolveReport,
                        optimality_gap, validate_route)
from .libio import write_report
from .model import ModelConfig, RoutingPolicy, ablate, augmented_solve
from .training import TrainConfig, train

REFERENCES = ("exact", "two_opt", "file", "none")


def _instance_seed(master_seed: int, index: int) -> int:
    # independent per-instance seed stream; >> 1 keeps it in int64 range
    state = np.random.SeedSequence(entropy=(int(master_seed), int(index)))
    return int(state.generate_state(1, dtype=np.uint64)[0] >> 1)


def compute_reference_lengths(instances: Sequence[ProblemInstance],
                              reference: str,
                              reference_lengths: Optional[Dict[str, float]] = None,
                              ) -> List[Optional[float]]:
    """Reference length per instance, in instance order."""
    if reference not in REFERENCES:
        raise ConfigurationError(
            f"unknown reference '{reference}'; expected one of {REFERENCES}")
    if reference == "none":
        return [None] * len(instances)
    if reference == "file":
        table = reference_lengths or {}
        missing = [inst.instance_id() for inst in instances
                   if inst.instance_id() not in table]
        if missing:
            raise DataError(
                "reference=file is missing lengths for instances: "
                + ", ".join(missing))
        return [float(table[inst.instance_id()]) for inst in instances]
    if reference == "exact":
        for inst in instances:
            if inst.kind is ProblemKind.CVRP:
                raise ConfigurationError(
                    "reference=exact has no CVRP oracle; use two_opt or file "
                    f"(instance {inst.instance_id()})")
            if inst.n > HELD_KARP_MAX_N:
                raise ConfigurationError(
                    f"reference=exact requires n <= {HELD_KARP_MAX_N}; "
                    f"instance {inst.instance_id()} has n={inst.n}")
        return [held_karp(inst).length for inst in instances]
    # two_opt
    return [reference_tour_length(inst) for inst in instances]


@dataclass
class EvalResult:
    """Aggregate of one evaluation pass over an instance set."""

    reports: List[SolveReport]
    reference: str
    n_aug: int
    seed: int
    mean_length: float
    mean_gap: Optional[float]
    feasible_fraction: float
    model_seconds: float      # policy solve time only
    reference_seconds: float  # excluded from model_seconds by construction

    def __len__(self):
        return len(self.reports)

    def summary(self) -> dict:
        return {
            "n_instances": len(self.reports),
            "reference": self.reference,
            "n_aug": self.n_aug,
            "seed": self.seed,
            "mean_length": self.mean_length,
            "mean_gap": self.mean_gap,
            "gap_aggregation": "mean_of_instance_gaps",
            "feasible_fraction": self.feasible_fraction,
            "model_seconds": self.model_seconds,
            "reference_seconds": self.reference_seconds,
        }


def evaluate(policy: RoutingPolicy, instances: Sequence[ProblemInstance],
             n_aug: int = 1, reference: str = "exact", *,
             reference_lengths: Optional[Dict[str, float]] = None,
             seed: int = 0, n_starts: Optional[int] = None,
             workers: int = 1, method: str = "policy") -> EvalResult:
    """Solve every instance with ``augmented_solve`` and aggregate.

    Instances are solved independently (``workers`` threads when > 1) and the
    reports are merged in instance order, so the result is deterministic for
    a fixed master ``seed``.  An empty instance set yields an empty result.
    """
    instances = list(instances)
    if not instances:
        return EvalResult(reports=[], reference=reference, n_aug=n_aug,
                          seed=int(seed), mean_length=float("nan"),
                          mean_gap=None, feasible_fraction=1.0,
                          model_seconds=0.0, reference_seconds=0.0)

    t_ref = time.perf_counter()
    refs = compute_reference_lengths(instances, reference, reference_lengths)
    reference_seconds = time.perf_counter() - t_ref

    def solve_one(item):
        index, inst = item
        return augmented_solve(policy, inst, n_aug=n_aug,
                               seed=_instance_seed(seed, index),
                               n_starts=n_starts,
                               reference_length=refs[index], method=method)

    was_training = policy.training
    policy.eval()
    t0 = time.perf_counter()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                reports = list(pool.map(solve_one, enumerate(instances)))
        else:
            reports = [solve_one(item) for item in enumerate(instances)]
    finally:
        if was_training:
            policy.train()
    model_seconds = time.perf_counter() - t0

    feasible = 0
    for inst, rep in zip(instances, reports):
        try:
            validate_route(inst, np.asarray(rep.route))
            feasible += 1
        except FeasibilityError:
            rep.meta["infeasible"] = True

    lengths = np.array([rep.length for rep in reports], dtype=np.float64)
    gaps = [rep.gap for rep in reports if rep.gap is not None]
    mean_gap = float(np.mean(gaps)) if gaps else None
    return EvalResult(reports=reports, reference=reference, n_aug=n_aug,
                      seed=int(seed), mean_length=float(lengths.mean()),
                      mean_gap=mean_gap,
                      feasible_fraction=feasible / len(instances),
                      model_seconds=model_seconds,
                      reference_seconds=reference_seconds)


def write_eval_report(path, result: EvalResult, config_record: Optional[dict] = None):
    """JSON-lines report: config record (if any), summary, then one record
    per instance in instance order."""
    head = []
    if config_record:
        head.append({"record": "config", **config_record})
    head.append({"record": "summary", **result.summary()})
    write_report(result.reports, path, extra_records=head)


# ---------------------------------------------------------------------------
# ablation driver: train + evaluate each variant under an identical budget
# ---------------------------------------------------------------------------

@dataclass
class AblationRun:
    variant: str
    seed: int
    checkpoint: str
    mean_length: float
    mean_gap: Optional[float]
    train_seconds: float

    def to_record(self) -> dict:
        return {"record": "ablation_run", "variant": self.variant,
                "seed": self.seed, "checkpoint": self.checkpoint,
                "mean_length": self.mean_length, "mean_gap": self.mean_gap,
                "train_seconds": self.train_seconds}


def run_ablation(model_config: ModelConfig, train_config: TrainConfig,
                 eval_instances: Sequence[ProblemInstance],
                 variants: Sequence[str] = ("full", "no_node_encoder",
                                            "no_graph_encoder", "no_gcn"),
                 seeds: Sequence[int] = (0,), *, out_dir,
                 reference: str = "exact",
                 reference_lengths: Optional[Dict[str, float]] = None,
                 n_aug: int = 1, n_starts: Optional[int] = None,
                 workers: int = 1,
                 progress: Optional[callable] = None) -> List[AblationRun]:
    """Train every (variant, seed) pair under the *same* TrainConfig, then
    evaluate greedily on the shared held-out set.  Checkpoints and training
    logs land in ``out_dir`` as ``<variant>-s<seed>.{pt,log.jsonl}``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs: List[AblationRun] = []
    for variant in variants:
        cfg = ablate(model_config, variant)
        for seed in seeds:
            tcfg = replace(train_config, seed=int(seed))
            ckpt = out_dir / f"{variant}-s{seed}.pt"
            t0 = time.perf_counter()
            policy, _ = train(cfg, tcfg, checkpoint_path=ckpt,
                              log_path=out_dir / f"{variant}-s{seed}.log.jsonl")
            train_seconds = time.perf_counter() - t0
            result = evaluate(policy, eval_instances, n_aug=n_aug,
                              reference=reference,
                              reference_lengths=reference_lengths,
                              seed=int(seed), n_starts=n_starts,
                              workers=workers, method=f"policy/{variant}")
            run = AblationRun(variant=variant, seed=int(seed),
                              checkpoint=str(ckpt),
                              mean_length=result.mean_length,
                              mean_gap=result.mean_gap,
                              train_seconds=train_seconds)
            runs.append(run)
            if progress is not None:
                progress(run)
    return runs
