"""Model hyper-parameter container."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigurationError

EDGE_INPUT = "edge_input"
NODE_INPUT = "node_input"

ABLATION_VARIANTS = ("full", "no_precoder", "no_node_encoder",
                     "no_graph_encoder", "no_gcn")


@dataclass
class ModelConfig:
    """Architecture settings for :class:`~efr.model.network.RoutingPolicy`.

    The defaults follow the reference training setup (width 256, 16 heads,
    feed-forward width 512, six graph-conv layers with a three-layer MLP head,
    six node attention layers, 20 nearest neighbours).

    ``variant`` chooses the policy input: ``edge_input`` builds node
    embeddings from the distance matrix alone (the precoder turns edge
    weights into temporary node vectors via one-hot column identities), while
    ``node_input`` embeds raw coordinates (plus normalized demand for CVRP)
    and drops the precoder.

    The ``use_*`` switches ablate whole blocks; every removal keeps the
    remaining dataflow intact (a removed encoder simply contributes no stream
    to the decoder).
    """

    embed_dim: int = 256
    num_heads: int = 16
    ff_dim: int = 512
    precoder_layers: int = 1
    gcn_layers: int = 6
    mlp_layers: int = 3
    node_encoder_layers: int = 6
    k_neighbors: int = 20
    onehot_pool: int = 256
    mix_hidden: int = 16
    logit_clip: float = 10.0
    gate_eps: float = 1e-5
    variant: str = EDGE_INPUT
    use_precoder: bool = True
    use_graph_encoder: bool = True
    use_node_encoder: bool = True
    use_gcn: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in (EDGE_INPUT, NODE_INPUT):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.embed_dim <= 0 or self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim ({self.embed_dim}) must be a positive multiple of "
                f"num_heads ({self.num_heads})")
        if self.embed_dim % 2 != 0:
            raise ConfigurationError("embed_dim must be even (edge features use "
                                     "two half-width channels)")
        if not (self.use_graph_encoder or self.use_node_encoder):
            raise ConfigurationError("at least one encoder stream must stay enabled")
        if self.variant == NODE_INPUT and self.use_precoder:
            raise ConfigurationError("the node_input variant has no precoder; "
                                     "set use_precoder=False")
        for name in ("precoder_layers", "gcn_layers", "mlp_layers",
                     "node_encoder_layers", "k_neighbors", "onehot_pool",
                     "mix_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.logit_clip <= 0:
            raise ConfigurationError("logit_clip must be positive")
        if self.gate_eps <= 0:
            raise ConfigurationError("gate_eps must be positive")

    @property
    def qkv_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def streams(self) -> tuple:
        out = []
        if self.use_graph_encoder:
            out.append("graph")
        if self.use_node_encoder:
            out.append("node")
        return tuple(out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small double-precision-friendly setup for gradient checks/tests."""
        base = dict(embed_dim=8, num_heads=2, ff_dim=16, precoder_layers=1,
                    gcn_layers=1, mlp_layers=1, node_encoder_layers=1,
                    k_neighbors=4, onehot_pool=16, mix_hidden=4)
        base.update(overrides)
        return cls(**base)


def ablate(config: ModelConfig, variant: str) -> ModelConfig:
    """Return a copy of ``config`` with one architectural block removed.

    ``full`` returns an unchanged copy.  Removing the precoder in the
    edge-input variant replaces it with a per-node projection of the sorted
    nearest-neighbour distances, and disables instance augmentation (there is
    no longer a random one-hot assignment to resample).
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(
            f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    cfg = dataclasses.replace(config)
    if variant == "no_precoder":
        cfg = dataclasses.replace(cfg, use_precoder=False)
    elif variant == "no_node_encoder":
        cfg = dataclasses.replace(cfg, use_node_encoder=False)
    elif variant == "no_graph_encoder":
        cfg = dataclasses.replace(cfg, use_graph_encoder=False)
    elif variant == "no_gcn":
        cfg = dataclasses.replace(cfg, use_gcn=False)
    cfg.validate()
    return cfg
