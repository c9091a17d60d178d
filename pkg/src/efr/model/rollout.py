"""Multi-start decoding: batching, rollouts, and inference-time augmentation.

Every trajectory in a rollout is forced to make a distinct first selection
(trajectory t starts at node t for tours, at customer t+1 for CVRP), so a
single instance yields ``n_starts`` diverse solutions in one decoder pass.
Log-probabilities cover only the steps the policy actually chose — the forced
first step is excluded.

Inference-time augmentation re-solves the same instance under solution-
preserving re-encodings: fresh one-hot identity assignments for the
edge-input variant, the eight dihedral symmetries of the unit square for the
node-input variant.  Run 0 always uses the canonical encoding (one-hot seed
0 / identity transform), so the set of rollouts at ``n_aug`` is a superset of
the set at any smaller ``n_aug`` under the same master seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigurationError
from ..instances import (ProblemInstance, ProblemKind, Solution, SolveReport,
                         knn_sparsify, normalize_cvrp_route, optimality_gap,
                         solution_length)
from .config import EDGE_INPUT, NODE_INPUT
from .network import RoutingPolicy

NINF = float("-inf")

# The eight symmetries of the unit square, identity first.
DIHEDRAL_TRANSFORMS = (
    lambda x, y: (x, y),
    lambda x, y: (1.0 - x, y),
    lambda x, y: (x, 1.0 - y),
    lambda x, y: (1.0 - x, 1.0 - y),
    lambda x, y: (y, x),
    lambda x, y: (1.0 - y, x),
    lambda x, y: (y, 1.0 - x),
    lambda x, y: (1.0 - y, 1.0 - x),
)


def apply_dihedral(coords: np.ndarray, index: int) -> np.ndarray:
    """Apply one of the 8 unit-square symmetries to (n, 2) coordinates."""
    if not 0 <= index < len(DIHEDRAL_TRANSFORMS):
        raise ConfigurationError(f"dihedral transform index must be in [0, 8), got {index}")
    x, y = coords[:, 0], coords[:, 1]
    tx, ty = DIHEDRAL_TRANSFORMS[index](x, y)
    return np.stack([tx, ty], axis=1)


def sample_onehot_assignment(n: int, pool: int, seed=0) -> np.ndarray:
    """Draw n DISTINCT identity indices from the pool, uniformly, without
    replacement.  ``seed`` may be an int or a tuple of ints."""
    if n > pool:
        raise ConfigurationError(
            f"one-hot pool of size {pool} cannot identify {n} nodes; "
            "increase onehot_pool")
    rng = np.random.default_rng(seed)
    return rng.permutation(pool)[:n].astype(np.int64)


@dataclass
class EncodedState:
    """Static encoder outputs plus the decoder's per-trajectory state."""

    kind: ProblemKind
    batch_size: int
    n: int
    embeddings: Dict[str, torch.Tensor]
    onehot_idx: Optional[torch.Tensor] = None
    # dynamic fields, populated while decoding
    first: Optional[torch.Tensor] = None      # shape: (batch, n_traj)
    current: Optional[torch.Tensor] = None    # shape: (batch, n_traj)
    visited: Optional[torch.Tensor] = None    # shape: (batch, n_traj, n) bool
    load: Optional[torch.Tensor] = None       # shape: (batch, n_traj)
    finished: Optional[torch.Tensor] = None   # shape: (batch, n_traj) bool


@dataclass
class RolloutBatch:
    """All trajectories of one decoder pass over a batch of instances."""

    kind: ProblemKind
    sequences: torch.Tensor      # shape: (batch, n_traj, T) int64
    lengths: torch.Tensor        # shape: (batch, n_traj)
    rewards: torch.Tensor        # shape: (batch, n_traj); reward = -length
    logp: torch.Tensor           # shape: (batch, n_traj); forced step excluded
    step_logps: torch.Tensor     # shape: (batch, n_traj, T-1)
    first_nodes: torch.Tensor    # shape: (batch, n_traj)
    n_starts: int
    mode: str
    probs: Optional[torch.Tensor] = None  # (batch, n_traj, T-1, n) if captured
    instances: List[ProblemInstance] = field(default_factory=list)

    def best(self):
        """(length, flat sequence) of the best trajectory per instance."""
        values, idx = self.lengths.min(dim=1)
        routes = self.sequences[torch.arange(self.sequences.size(0)), idx]
        return values, routes


class _Batch:
    """Instance data lifted into tensors of the policy's dtype."""

    def __init__(self, instances: Sequence[ProblemInstance], policy: RoutingPolicy,
                 coords_transform: Optional[int] = None):
        kinds = {inst.kind for inst in instances}
        sizes = {inst.n for inst in instances}
        if len(kinds) != 1 or len(sizes) != 1:
            raise ConfigurationError("all instances in a batch must share kind and size")
        self.kind = instances[0].kind
        self.n = instances[0].n
        self.instances = list(instances)
        cfg = policy.config
        dtype, device = policy.dtype, policy.device

        dist = np.stack([inst.dist for inst in instances])
        self.dist = torch.as_tensor(dist, dtype=dtype, device=device)
        k_eff = min(cfg.k_neighbors, self.n - 1)
        adj = np.stack([knn_sparsify(inst, k_eff).adj_code for inst in instances])
        self.adj_code = torch.as_tensor(adj, dtype=torch.int64, device=device)

        self.demands = None
        self.capacity = None
        if self.kind is ProblemKind.CVRP:
            dem = np.stack([inst.demands for inst in instances])
            self.demands = torch.as_tensor(dem, dtype=dtype, device=device)
            cap = np.array([inst.capacity for inst in instances], dtype=np.float64)
            self.capacity = torch.as_tensor(cap, dtype=dtype, device=device)

        self.node_features = None
        if cfg.variant == NODE_INPUT:
            if any(inst.coords is None for inst in instances):
                raise ConfigurationError("node_input variant needs coordinates")
            feats = []
            for inst in instances:
                coords = inst.coords
                if coords_transform is not None:
                    coords = apply_dihedral(coords, coords_transform)
                demand = (inst.demands / inst.capacity if inst.kind is ProblemKind.CVRP
                          else np.zeros(inst.n))
                feats.append(np.column_stack([coords, demand]))
            self.node_features = torch.as_tensor(np.stack(feats), dtype=dtype,
                                                 device=device)


def _as_instances(instances) -> List[ProblemInstance]:
    if isinstance(instances, ProblemInstance):
        return [instances]
    out = list(instances)
    if not out:
        raise ConfigurationError("need at least one instance")
    return out


def encode(policy: RoutingPolicy, instances, onehot_assignments=None,
           onehot_seed=0, coords_transform: Optional[int] = None) -> EncodedState:
    """Run the encoders over a batch of same-shaped instances."""
    instances = _as_instances(instances)
    batch = _Batch(instances, policy, coords_transform)
    cfg = policy.config
    onehot_idx = None
    if cfg.variant == EDGE_INPUT and cfg.use_precoder:
        if onehot_assignments is None:
            rows = [sample_onehot_assignment(batch.n, cfg.onehot_pool, (onehot_seed, i))
                    for i in range(len(instances))]
            onehot_assignments = np.stack(rows)
        onehot_idx = torch.as_tensor(np.asarray(onehot_assignments), dtype=torch.int64,
                                     device=policy.device)
        if onehot_idx.dim() == 1:
            onehot_idx = onehot_idx[None, :].expand(len(instances), -1)
        if onehot_idx.shape != (len(instances), batch.n):
            raise ConfigurationError(
                f"one-hot assignment must have shape ({len(instances)}, {batch.n})")
        if int(onehot_idx.max()) >= cfg.onehot_pool or int(onehot_idx.min()) < 0:
            raise ConfigurationError("one-hot assignment index out of pool range")
    embeddings = policy.encode(batch.dist, batch.adj_code, onehot_idx,
                               batch.node_features)
    state = EncodedState(kind=batch.kind, batch_size=len(instances), n=batch.n,
                         embeddings=embeddings, onehot_idx=onehot_idx)
    state.batch_data = batch  # stashed for the decode loops
    return state


def rollout(policy: RoutingPolicy, instances, n_starts: Optional[int] = None,
            mode: str = "greedy", seed: int = 0, onehot_assignments=None,
            onehot_seed: Optional[int] = None, forced_sequences=None,
            coords_transform: Optional[int] = None,
            capture_probs: bool = False) -> RolloutBatch:
    """Multi-start decode of a batch of instances.

    mode 'greedy' takes the arg-max at every step, 'sample' draws from the
    step distribution (deterministic per ``seed``), 'replay' re-scores the
    given ``forced_sequences`` (shape (batch, n_traj, T)) and returns their
    log-probabilities under the current parameters.

    ``onehot_seed`` defaults to ``seed``, so each sampling seed also draws
    fresh one-hot identities (the training-time randomization).  To re-score
    a sampled batch exactly, replay with the same seed/onehot settings it was
    sampled under.
    """
    if mode not in ("greedy", "sample", "replay"):
        raise ConfigurationError(f"unknown rollout mode {mode!r}")
    if mode == "replay" and forced_sequences is None:
        raise ConfigurationError("replay mode needs forced_sequences")
    instances = _as_instances(instances)
    if onehot_seed is None:
        onehot_seed = seed
    state = encode(policy, instances, onehot_assignments, onehot_seed,
                   coords_transform)
    batch = state.batch_data
    kind = batch.kind

    if kind is ProblemKind.CVRP:
        max_starts = batch.n - 1
    else:
        max_starts = batch.n
    if forced_sequences is not None:
        forced_sequences = torch.as_tensor(np.asarray(forced_sequences),
                                           dtype=torch.int64, device=policy.device)
        if forced_sequences.dim() != 3 or forced_sequences.size(0) != len(instances):
            raise ConfigurationError("forced_sequences must be (batch, n_traj, T)")
        n_starts = forced_sequences.size(1)
    if n_starts is None:
        n_starts = max_starts
    if not 1 <= n_starts <= max_starts:
        raise ConfigurationError(
            f"n_starts must be in [1, {max_starts}] for this instance, got {n_starts}")

    generator = None
    if mode == "sample":
        generator = torch.Generator(device="cpu")
        generator.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)

    policy.decoder.set_instance(state.embeddings)
    if kind is ProblemKind.CVRP:
        result = _decode_cvrp(policy, state, batch, n_starts, mode, generator,
                              forced_sequences, capture_probs)
    else:
        result = _decode_tour(policy, state, batch, n_starts, mode, generator,
                              forced_sequences, capture_probs)
    result.instances = batch.instances
    return result


def _select(logits, logprobs, mode, generator, forced_action):
    # logits/logprobs shape: (batch, n_traj, n)
    if mode == "replay":
        action = forced_action
    elif mode == "greedy":
        action = logits.argmax(dim=2)
    else:
        batch, n_traj, n = logits.shape
        probs = F.softmax(logits, dim=2).reshape(batch * n_traj, n)
        action = torch.multinomial(probs, 1, generator=generator).reshape(batch, n_traj)
    step_logp = logprobs.gather(2, action[:, :, None]).squeeze(2)
    return action, step_logp


def _decode_tour(policy, state, batch, n_starts, mode, generator,
                 forced_sequences, capture_probs):
    B, n = state.batch_size, state.n
    P = n_starts
    device = policy.device
    if mode == "replay":
        first = forced_sequences[:, :, 0]
    else:
        first = torch.arange(P, device=device)[None, :].expand(B, P).contiguous()
    visited = torch.zeros(B, P, n, dtype=torch.bool, device=device)
    visited.scatter_(2, first[:, :, None], True)
    state.first, state.current, state.visited = first, first, visited

    seqs = [first]
    step_logps = []
    probs_log = [] if capture_probs else None
    current = first
    for step in range(1, n):
        ninf_mask = torch.zeros(B, P, n, dtype=policy.dtype, device=device)
        ninf_mask.masked_fill_(visited, NINF)
        logits = policy.decoder(first, current, ninf_mask)
        logprobs = F.log_softmax(logits, dim=2)
        forced = forced_sequences[:, :, step] if mode == "replay" else None
        action, step_logp = _select(logits, logprobs, mode, generator, forced)
        if capture_probs:
            probs_log.append(F.softmax(logits, dim=2))
        visited.scatter_(2, action[:, :, None], True)
        seqs.append(action)
        step_logps.append(step_logp)
        current = action
        state.current = current

    sequences = torch.stack(seqs, dim=2)
    # shape: (batch, n_traj, n)
    step_logps = torch.stack(step_logps, dim=2)
    lengths = _tour_lengths(batch.dist, sequences)
    return RolloutBatch(kind=state.kind, sequences=sequences, lengths=lengths,
                        rewards=-lengths, logp=step_logps.sum(dim=2),
                        step_logps=step_logps, first_nodes=first, n_starts=P,
                        mode=mode,
                        probs=torch.stack(probs_log, dim=2) if capture_probs else None)


def _decode_cvrp(policy, state, batch, n_starts, mode, generator,
                 forced_sequences, capture_probs):
    B, n = state.batch_size, state.n
    m = n - 1  # customers
    P = n_starts
    device, dtype = policy.device, policy.dtype
    demands = batch.demands            # shape: (batch, n)
    capacity = batch.capacity[:, None]  # shape: (batch, 1)

    if mode == "replay":
        first = forced_sequences[:, :, 0]
    else:
        first = torch.arange(1, P + 1, device=device)[None, :].expand(B, P).contiguous()
    visited = torch.zeros(B, P, n, dtype=torch.bool, device=device)
    visited.scatter_(2, first[:, :, None], True)
    visited[:, :, 0] = False  # the depot is always revisitable
    load = demands[:, None, :].expand(B, P, n).gather(2, first[:, :, None]).squeeze(2)
    current = first
    finished = torch.zeros(B, P, dtype=torch.bool, device=device)
    state.first, state.current, state.visited = first, first, visited
    state.load, state.finished = load, finished

    seqs = [first]
    step_logps = []
    probs_log = [] if capture_probs else None
    max_steps = 2 * m + 2
    step = 0
    while True:
        if mode == "replay":
            if step + 1 >= forced_sequences.size(2):
                break
        elif bool(finished.all()):
            break
        step += 1
        if step > max_steps:
            raise RuntimeError("CVRP decoding exceeded its step bound; "
                               "this indicates a masking bug")
        remaining = capacity - load  # shape: (batch, n_traj)
        infeasible = visited.clone()
        infeasible |= demands[:, None, :] > remaining[:, :, None]
        # no empty trips: the depot is blocked right after a depot visit
        # (finished trajectories park at the depot instead)
        infeasible[:, :, 0] = (current == 0) & ~finished
        ninf_mask = torch.zeros(B, P, n, dtype=dtype, device=device)
        ninf_mask.masked_fill_(infeasible, NINF)
        logits = policy.decoder(first, current, ninf_mask, load=remaining / capacity)
        logprobs = F.log_softmax(logits, dim=2)
        forced = forced_sequences[:, :, step] if mode == "replay" else None
        action, step_logp = _select(logits, logprobs, mode, generator, forced)
        if capture_probs:
            probs_log.append(F.softmax(logits, dim=2))

        is_depot = action == 0
        chosen_demand = demands[:, None, :].expand(B, P, n).gather(
            2, action[:, :, None]).squeeze(2)
        load = torch.where(is_depot, torch.zeros_like(load), load + chosen_demand)
        visited.scatter_(2, action[:, :, None], True)
        visited[:, :, 0] = False
        current = action
        all_served = visited[:, :, 1:].all(dim=2)
        finished = finished | (all_served & is_depot)
        state.current, state.load, state.finished = current, load, finished
        seqs.append(action)
        step_logps.append(step_logp)

    sequences = torch.stack(seqs, dim=2)
    step_logps = (torch.stack(step_logps, dim=2) if step_logps
                  else torch.zeros(B, P, 0, dtype=dtype, device=device))
    lengths = _cvrp_lengths(batch.dist, sequences)
    return RolloutBatch(kind=state.kind, sequences=sequences, lengths=lengths,
                        rewards=-lengths, logp=step_logps.sum(dim=2),
                        step_logps=step_logps, first_nodes=first, n_starts=P,
                        mode=mode,
                        probs=torch.stack(probs_log, dim=2) if capture_probs else None)


def _tour_lengths(dist, sequences):
    # dist shape: (batch, n, n); sequences: (batch, n_traj, n)
    B = dist.size(0)
    src = sequences
    dst = torch.roll(sequences, shifts=-1, dims=2)
    b_idx = torch.arange(B, device=dist.device)[:, None, None]
    return dist[b_idx, src, dst].sum(dim=2)


def _cvrp_lengths(dist, sequences):
    # walk starts at the depot; finished trajectories pad with depot (arc 0)
    B, P, T = sequences.shape
    depot = torch.zeros(B, P, 1, dtype=sequences.dtype, device=sequences.device)
    walk = torch.cat([depot, sequences], dim=2)
    b_idx = torch.arange(B, device=dist.device)[:, None, None]
    return dist[b_idx, walk[:, :, :-1], walk[:, :, 1:]].sum(dim=2)


# ---------------------------------------------------------------------------
# inference-time augmentation
# ---------------------------------------------------------------------------

def augmentation_limit(policy: RoutingPolicy) -> Optional[int]:
    """Largest supported n_aug for this policy (None = unlimited)."""
    cfg = policy.config
    if cfg.variant == NODE_INPUT:
        return len(DIHEDRAL_TRANSFORMS)
    if not cfg.use_precoder:
        return 1
    return None


def augmented_solve(policy: RoutingPolicy, instance: ProblemInstance,
                    n_aug: int = 1, seed: int = 0, n_starts: Optional[int] = None,
                    reference_length: Optional[float] = None,
                    method: str = "policy") -> SolveReport:
    """Greedy multi-start solve under ``n_aug`` augmentations; returns the
    best solution found, with its length recomputed exactly from the instance.
    """
    if n_aug < 1:
        raise ConfigurationError(f"n_aug must be at least 1, got {n_aug}")
    cfg = policy.config
    limit = augmentation_limit(policy)
    if limit is not None and n_aug > limit:
        if limit == 1:
            raise ConfigurationError(
                "this configuration has no augmentation handle (edge input "
                "without precoder); n_aug must be 1")
        raise ConfigurationError(
            f"the node_input variant supports at most {limit} dihedral "
            f"augmentations, got n_aug={n_aug}")

    t0 = time.perf_counter()
    best_length = float("inf")
    best_route = None
    with torch.no_grad():
        for run in range(n_aug):
            kwargs = {}
            if cfg.variant == EDGE_INPUT and cfg.use_precoder:
                assignment_seed = 0 if run == 0 else (int(seed), run)
                assignment = sample_onehot_assignment(instance.n, cfg.onehot_pool,
                                                      assignment_seed)
                kwargs["onehot_assignments"] = assignment[None, :]
            elif cfg.variant == NODE_INPUT:
                kwargs["coords_transform"] = run
            rb = rollout(policy, instance, n_starts=n_starts, mode="greedy", **kwargs)
            lengths, routes = rb.best()
            if float(lengths[0]) < best_length:
                best_length = float(lengths[0])
                best_route = routes[0].cpu().numpy()
    seconds = time.perf_counter() - t0

    if instance.kind is ProblemKind.CVRP:
        walk = normalize_cvrp_route(np.concatenate([[0], best_route]))
        solution = Solution.from_route(instance, walk)
    else:
        solution = Solution.from_route(instance, best_route)
    gap = None
    if reference_length is not None:
        gap = optimality_gap(solution.length, reference_length)
    return SolveReport(instance_id=instance.instance_id(), method=method,
                       n_aug=n_aug, route=[int(v) for v in solution.route],
                       length=solution.length, reference_length=reference_length,
                       gap=gap, seconds=seconds,
                       meta={"n_starts": n_starts or "max",
                             "variant": cfg.variant, "seed": int(seed)})
