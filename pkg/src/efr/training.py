"""Policy-gradient training with a shared multi-start baseline, plus
checkpointing and an analytic-vs-numeric gradient check.

The objective is plain REINFORCE over the multi-start trajectories of each
instance: with rewards ``r_i = -length_i`` and the per-instance mean reward
as baseline, the surrogate loss is ``-mean((r_i - mean_i r) * logp_i)``.
Because every trajectory of an instance shares the baseline, the advantages
of each instance sum to zero exactly (they are computed in float64).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError, TrainingError
from .instances import Distribution, ProblemKind, generate_instance
from .model.config import ModelConfig
from .model.network import RoutingPolicy, build_policy
from .model.rollout import RolloutBatch, rollout

CHECKPOINT_FORMAT_VERSION = "efr-ckpt-1"


@dataclass
class TrainConfig:
    """Optimization settings.

    ``lr_milestones`` lists 1-based epoch indices at which the learning rate
    is multiplied by ``lr_decay`` (applied at the start of that epoch).  The
    default decays once, at the start of the last 10% of epochs.
    """

    kind: str = "tsp"
    n: int = 20
    distribution: str = "uniform"
    epochs: int = 10
    instances_per_epoch: int = 100_000
    batch_size: int = 64
    n_starts: Optional[int] = None  # None = one start per node/customer
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_milestones: Optional[List[int]] = None
    grad_clip: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        ProblemKind.coerce(self.kind)
        Distribution.coerce(self.distribution)
        for name in ("n", "epochs", "instances_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ConfigurationError("lr and lr_decay must be positive")
        if self.lr_milestones is None:
            self.lr_milestones = [max(1, math.ceil(0.9 * self.epochs))] \
                if self.epochs > 1 else []

    def effective_lr(self, epoch: int) -> float:
        """Learning rate in force during 1-based ``epoch``."""
        drops = sum(1 for m in self.lr_milestones if m <= epoch)
        return self.lr * (self.lr_decay ** drops)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochStats:
    epoch: int
    mean_length: float
    mean_loss: float
    lr: float
    n_instances: int
    seconds: float

    def to_record(self) -> dict:
        return {"event": "epoch", **dataclasses.asdict(self)}


def reinforce_loss(batch: RolloutBatch):
    """Surrogate loss and advantages for one rollout batch.

    Advantages are computed in float64 so they sum to (numerically) exactly
    zero per instance.  Raises if the shared baseline is degenerate (fewer
    than two trajectories per instance).
    """
    if batch.n_starts < 2:
        raise ConfigurationError(
            "the shared baseline needs at least 2 trajectories per instance; "
            f"got n_starts={batch.n_starts}")
    rewards = batch.rewards.detach().to(torch.float64)
    advantages = rewards - rewards.mean(dim=1, keepdim=True)
    # shape: (batch, n_traj)
    loss = -(advantages.to(batch.logp.dtype) * batch.logp).mean()
    return loss, advantages


def _batch_instance_seeds(master_seed: int, epoch: int, batch_index: int,
                          count: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=(int(master_seed), int(epoch), int(batch_index)))
    return ss.generate_state(count, dtype=np.uint64) >> 1  # keep them int64-safe


def train_epoch(policy: RoutingPolicy, config: TrainConfig, epoch: int,
                optimizer: Optional[torch.optim.Optimizer] = None,
                log_fn: Optional[Callable[[dict], None]] = None) -> EpochStats:
    """One pass over ``instances_per_epoch`` freshly sampled instances.

    Without an optimizer this is a dry evaluation pass (gradients off).
    Instance seeds derive from (seed, epoch, batch), so any epoch is
    reproducible in isolation.
    """
    t0 = time.perf_counter()
    n_batches = math.ceil(config.instances_per_epoch / config.batch_size)
    lr = config.effective_lr(epoch)
    if optimizer is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    total_len = 0.0
    total_loss = 0.0
    total_inst = 0
    kind = ProblemKind.coerce(config.kind)
    for b in range(n_batches):
        count = min(config.batch_size,
                    config.instances_per_epoch - b * config.batch_size)
        seeds = _batch_instance_seeds(config.seed, epoch, b, count)
        instances = [generate_instance(kind, config.n, config.distribution,
                                       seed=int(s)) for s in seeds]
        sample_seed = int(_batch_instance_seeds(config.seed, epoch, b + n_batches, 1)[0])
        rb = rollout(policy, instances, n_starts=config.n_starts, mode="sample",
                     seed=sample_seed, onehot_seed=sample_seed)
        loss, _ = reinforce_loss(rb)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at epoch {epoch}, batch {b} "
                f"(seed tuple ({config.seed}, {epoch}, {b})); aborting")
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(policy.parameters(), config.grad_clip)
            optimizer.step()
        total_len += float(rb.lengths.mean()) * count
        total_loss += float(loss.detach()) * count
        total_inst += count
        if log_fn is not None and (b % 50 == 0 or b == n_batches - 1):
            log_fn({"event": "batch", "epoch": epoch, "batch": b,
                    "mean_length": total_len / total_inst, "lr": lr})
    return EpochStats(epoch=epoch, mean_length=total_len / total_inst,
                      mean_loss=total_loss / total_inst, lr=lr,
                      n_instances=total_inst, seconds=time.perf_counter() - t0)


def make_optimizer(policy: RoutingPolicy, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(policy.parameters(), lr=config.lr,
                            betas=(0.9, 0.999), eps=1e-8)


def train(model_config: ModelConfig, train_config: TrainConfig,
          checkpoint_path=None, log_path=None, resume: bool = False,
          policy: Optional[RoutingPolicy] = None,
          epoch_callback: Optional[Callable[[EpochStats], None]] = None):
    """Full training run; returns (policy, list of EpochStats).

    Saves a versioned checkpoint after every epoch when ``checkpoint_path``
    is given, and appends JSON-lines progress records to ``log_path``.  With
    ``resume=True`` an existing checkpoint at that path is loaded (model,
    optimizer, epoch counter) and training continues from there.
    """
    log_fh = open(log_path, "a") if log_path else None

    def log(record: dict):
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()

    start_epoch = 1
    optimizer_state = None
    if policy is None:
        if resume:
            if checkpoint_path is None or not Path(checkpoint_path).exists():
                raise CheckpointError("resume requested but no checkpoint found "
                                      f"at {checkpoint_path}")
            policy, model_config, extra = load_checkpoint(checkpoint_path)
            start_epoch = int(extra.get("epoch", 0)) + 1
            optimizer_state = extra.get("optimizer")
        else:
            policy = build_policy(model_config, seed=train_config.seed)
    policy.train()
    optimizer = make_optimizer(policy, train_config)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    log({"event": "config", "model": model_config.to_dict(),
         "train": train_config.to_dict(), "start_epoch": start_epoch})
    history: List[EpochStats] = []
    try:
        for epoch in range(start_epoch, train_config.epochs + 1):
            stats = train_epoch(policy, train_config, epoch, optimizer, log_fn=log)
            history.append(stats)
            log(stats.to_record())
            if epoch_callback is not None:
                epoch_callback(stats)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, policy, model_config,
                                extra={"epoch": epoch,
                                       "train_config": train_config.to_dict(),
                                       "optimizer": optimizer.state_dict(),
                                       "mean_length": stats.mean_length})
    finally:
        if log_fh is not None:
            log_fh.close()
    return policy, history


# ---------------------------------------------------------------------------
# checkpoints (efr-ckpt-1)
# ---------------------------------------------------------------------------

def save_checkpoint(path, policy: RoutingPolicy, model_config: ModelConfig,
                    extra: Optional[dict] = None) -> None:
    """Atomic-ish save: write to a sibling temp file, then rename."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model_config.to_dict(),
        "state_dict": policy.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Load (policy, model_config, extra); checks the format version."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt/truncated/foreign file
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a policy checkpoint")
    if payload["version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['version']!r}; "
            f"expected {CHECKPOINT_FORMAT_VERSION!r}")
    config = ModelConfig.from_dict(payload["model_config"])
    policy = RoutingPolicy(config)
    policy.load_state_dict(payload["state_dict"])
    policy.eval()
    return policy, config, payload.get("extra", {})


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradArrayReport:
    name: str
    shape: tuple
    analytic_norm: float
    numeric_norm: float
    norm_rel_err: float
    max_coord_rel_err: float
    frac_coords_below: float  # fraction of coordinates with rel err < coord_tol
    near_zero: bool           # gradient below the finite-difference noise floor


@dataclass
class GradcheckReport:
    arrays: List[GradArrayReport]
    worst_norm_rel_err: float
    worst_array: str
    coord_tol: float
    n_parameters: int
    seconds: float
    healthy_coord_fraction: float = 1.0  # coord pass rate over non-near-zero arrays

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.worst_norm_rel_err < threshold


# Central differences at step 1e-5 on a float64 forward pass resolve each
# gradient coordinate to roughly 1e-9 absolute (forward round-off ~1e-14
# divided by 2*step).  Arrays whose true gradient lies at or below that floor
# cannot be compared in relative terms, and several parameters here are
# EXACTLY zero-gradient by architecture (per-instance normalization is
# invariant to constant shifts, so pre-norm biases get no gradient; the
# precoder's query projection sees an all-zero input stream; softmax is
# invariant to the mixed-score output bias).  Such arrays are classified
# near-zero and reported with relative error 0; any real defect large enough
# to matter (absolute gradient error above ~1e-9 per coordinate) still
# registers through the coordinate-level floor.
COORD_FLOOR = 1e-5        # per-coordinate denominator floor
ZERO_ARRAY_REL = 3e-4     # near-zero cutoff, relative to the largest array norm


def gradcheck(model_config: Optional[ModelConfig] = None, kind="tsp", n: int = 5,
              seed: int = 0, step: float = 1e-5, coord_tol: float = 1e-4,
              n_starts: Optional[int] = None) -> GradcheckReport:
    """Compare autograd gradients of the surrogate loss against central
    finite differences, parameter array by parameter array, in float64.

    The loss is evaluated with teacher-forced actions (one recorded sampling
    rollout), so rewards and advantages are constants and the loss is a
    smooth function of the parameters almost everywhere.

    Per-array error: ||g_a - g_n|| / max(||g_a||, ||g_n||), defined as 0 for
    near-zero arrays (see above).  Per-coordinate error:
    |ga - gn| / max(|ga|, |gn|, COORD_FLOOR).
    """
    t0 = time.perf_counter()
    if model_config is None:
        model_config = ModelConfig.tiny()
    kind = ProblemKind.coerce(kind)
    instance = (generate_instance(kind, n, seed=seed) if kind is not ProblemKind.ATSP
                else generate_instance(kind, n, "uniform", seed=seed))

    default_dtype = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        policy = build_policy(model_config, seed=seed)
        policy = policy.double()
        recorded = rollout(policy, instance, n_starts=n_starts, mode="sample",
                           seed=seed, onehot_seed=seed)
        sequences = recorded.sequences.detach()

        def loss_value() -> torch.Tensor:
            rb = rollout(policy, instance, mode="replay",
                         forced_sequences=sequences, onehot_seed=seed)
            loss, _ = reinforce_loss(rb)
            return loss

        loss = loss_value()
        params = list(policy.named_parameters())
        analytic = torch.autograd.grad(loss, [p for _, p in params],
                                       allow_unused=True)

        pairs = []
        total = 0
        with torch.no_grad():
            for (name, param), grad_a in zip(params, analytic):
                if grad_a is None:
                    grad_a = torch.zeros_like(param)
                grad_n = torch.zeros_like(param)
                flat = param.view(-1)
                nflat = grad_n.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + step
                    f_plus = loss_value().item()
                    flat[i] = orig - step
                    f_minus = loss_value().item()
                    flat[i] = orig
                    nflat[i] = (f_plus - f_minus) / (2.0 * step)
                total += flat.numel()
                pairs.append((name, param, grad_a, grad_n))

        scale = max(max(float(ga.norm()), float(gn.norm()))
                    for _, _, ga, gn in pairs)
        zero_cut = ZERO_ARRAY_REL * scale
        arrays = []
        for name, param, grad_a, grad_n in pairs:
            na, nn = float(grad_a.norm()), float(grad_n.norm())
            near_zero = max(na, nn) < zero_cut
            norm_rel = (0.0 if near_zero
                        else float((grad_a - grad_n).norm()) / max(na, nn))
            denom = torch.clamp(torch.maximum(grad_a.abs(), grad_n.abs()),
                                min=COORD_FLOOR)
            coord_rel = (grad_a - grad_n).abs() / denom
            arrays.append(GradArrayReport(
                name=name, shape=tuple(param.shape), analytic_norm=na,
                numeric_norm=nn, norm_rel_err=norm_rel,
                max_coord_rel_err=float(coord_rel.max()),
                frac_coords_below=float((coord_rel < coord_tol).double().mean()),
                near_zero=near_zero))
    finally:
        torch.set_default_dtype(default_dtype)

    worst = max(arrays, key=lambda a: a.norm_rel_err)
    healthy = [a for a in arrays if not a.near_zero]
    healthy_total = sum(np.prod(a.shape) for a in healthy)
    healthy_ok = sum(a.frac_coords_below * np.prod(a.shape) for a in healthy)
    return GradcheckReport(arrays=arrays, worst_norm_rel_err=worst.norm_rel_err,
                           worst_array=worst.name, coord_tol=coord_tol,
                           n_parameters=total, seconds=time.perf_counter() - t0,
                           healthy_coord_fraction=float(healthy_ok / max(healthy_total, 1)))
