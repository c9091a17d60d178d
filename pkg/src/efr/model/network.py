"""The routing policy network.

Dataflow (edge-input variant):

    dist --(precoder: mixed-score attention over one-hot column ids)--> h_pre
    h_pre --(graph encoder: gated graph convs on the k-nn graph + MLP)--> h_graph
    h_pre --(node encoder: self-attention stack)--> h_node
    (h_graph, h_node) --(dual-stream decoder)--> step-wise selection logits

The node-input variant replaces the precoder with direct projections of the
coordinates (and normalized demand); ablation switches drop single blocks
while keeping the rest of the dataflow intact.
"""

from __future__ import annotations

import math
import threading
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError
from .config import EDGE_INPUT, NODE_INPUT, ModelConfig
from .layers import (AttentionEncoderLayer, FeedForward, GatedGraphConvLayer,
                     MixedScoreAttention, ResidualMLP, multi_head_attention,
                     reshape_by_heads)

NODE_FEATURE_DIM = 3  # x, y, demand / capacity (0 for plain tours)


class PrecoderBlock(nn.Module):
    """One mixed-score attention + feed-forward update of the row stream.

    Plain residuals, no normalization: the row stream starts at exactly zero
    and is only ever shifted by attention/feed-forward outputs.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.Wq = nn.Linear(d, d, bias=False)
        self.Wk = nn.Linear(d, d, bias=False)
        self.Wv = nn.Linear(d, d, bias=False)
        self.mixed = MixedScoreAttention(cfg.num_heads, cfg.mix_hidden)
        self.combine = nn.Linear(d, d)
        self.ff = FeedForward(d, cfg.ff_dim)

    def forward(self, row, col, edge):
        # row, col shape: (batch, n, embed); edge: (batch, n, n)
        q = reshape_by_heads(self.Wq(row), self.num_heads)
        k = reshape_by_heads(self.Wk(col), self.num_heads)
        v = reshape_by_heads(self.Wv(col), self.num_heads)
        att = self.mixed(q, k, v, edge)
        hat = row + self.combine(att)
        return hat + self.ff(hat)


class Precoder(nn.Module):
    """Turns the distance matrix into temporary node embeddings.

    Rows start as zero vectors; columns get distinct identity vectors drawn
    from a pool (a learnable pool->embed projection applied to one-hot codes,
    i.e. an embedding lookup).  Attention from rows to columns is scored by a
    per-head blend of dot products and raw edge weights, so the output is a
    function of the distance matrix and the sampled identities alone.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool_size = cfg.onehot_pool
        self.pool_proj = nn.Embedding(cfg.onehot_pool, cfg.embed_dim)
        bound = math.sqrt(1.0 / cfg.onehot_pool)  # as if Linear(pool, embed)
        nn.init.uniform_(self.pool_proj.weight, -bound, bound)
        self.blocks = nn.ModuleList(PrecoderBlock(cfg) for _ in range(cfg.precoder_layers))

    def forward(self, dist, onehot_idx):
        # dist shape: (batch, n, n); onehot_idx: (batch, n) int64, distinct per row
        col = self.pool_proj(onehot_idx)
        row = torch.zeros_like(col)
        for block in self.blocks:
            row = block(row, col, dist)
        return row
        # shape: (batch, n, embed)


class GraphEncoder(nn.Module):
    """Gated graph convolutions over the k-nn graph, then an MLP head.

    Edge features concatenate a linear embedding of the distance with a
    learned embedding of the adjacency code (0 none / 1 neighbour / 2 self).
    With the conv stack disabled the MLP head still runs on the projected
    input, and because both the convs and the head are residual, zeroing all
    their weights leaves exactly the input projection.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.node_proj = nn.Linear(d, d, bias=False)
        self.use_gcn = cfg.use_gcn
        if cfg.use_gcn:
            self.edge_weight_proj = nn.Linear(1, d // 2)
            self.edge_code_embed = nn.Embedding(3, d // 2)
            self.convs = nn.ModuleList(
                GatedGraphConvLayer(d, cfg.gate_eps) for _ in range(cfg.gcn_layers))
        self.mlp = ResidualMLP(d, cfg.mlp_layers)

    def forward(self, h_in, dist, adj_code):
        # h_in shape: (batch, n, embed); dist: (batch, n, n); adj_code: (batch, n, n)
        x = self.node_proj(h_in)
        if self.use_gcn:
            e = torch.cat([self.edge_weight_proj(dist[..., None]),
                           self.edge_code_embed(adj_code)], dim=-1)
            neighbor_mask = adj_code > 0
            for conv in self.convs:
                x, e = conv(x, e, neighbor_mask)
        return self.mlp(x)


class NodeEncoder(nn.Module):
    """Stack of self-attention encoder layers over node embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            AttentionEncoderLayer(cfg.embed_dim, cfg.num_heads, cfg.ff_dim)
            for _ in range(cfg.node_encoder_layers))

    def forward(self, h_in):
        x = h_in
        for layer in self.layers:
            x = layer(x)
        return x


class DecoderStream(nn.Module):
    """Per-stream decoder parameters (one for the graph stream, one for the
    node stream)."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.Wq_first = nn.Linear(embed_dim, embed_dim, bias=False)
        self.Wq_last = nn.Linear(embed_dim, embed_dim, bias=False)
        self.Wk = nn.Linear(embed_dim, embed_dim, bias=False)
        self.Wv = nn.Linear(embed_dim, embed_dim, bias=False)
        self.combine = nn.Linear(embed_dim, embed_dim)
        bound = math.sqrt(1.0 / embed_dim)
        # the combine projection starts small so that initial selection scores
        # sit in the responsive range of the tanh clip; at the default scale
        # the clipped scores ride the saturation shoulder, and the noisy
        # depot-return credit of multi-trip rollouts can pin every score flat
        # (zero gradient) before any geometry is learned
        nn.init.uniform_(self.combine.weight, -0.1 * bound, 0.1 * bound)
        nn.init.zeros_(self.combine.bias)
        # stand-in for the (first, last) embeddings before any selection; the
        # forced first step means it never influences a rollout decision
        self.placeholder = nn.Parameter(torch.empty(embed_dim).uniform_(-bound, bound))


class DualStreamDecoder(nn.Module):
    """Pointer decoder over the two encoder streams.

    One merged query (sum of per-stream first/last projections, plus a
    remaining-capacity term for CVRP) attends separately into each stream's
    keys/values; the combined attention outputs are scored against the sum of
    the raw stream embeddings, clipped through tanh, masked, and normalized.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.embed_dim = cfg.embed_dim
        self.logit_clip = cfg.logit_clip
        self.streams = nn.ModuleDict({name: DecoderStream(cfg.embed_dim)
                                      for name in cfg.streams})
        self.capacity_proj = nn.Linear(1, cfg.embed_dim, bias=False)
        # per-instance k/v cache is thread-local so instances can be solved
        # concurrently on a shared policy
        self._tls = threading.local()

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_tls", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._tls = threading.local()

    def set_instance(self, embeddings: Dict[str, torch.Tensor]):
        """Precompute per-stream keys/values from the encoder outputs."""
        if set(embeddings) != set(self.streams.keys()):
            raise ConfigurationError(
                f"decoder streams {sorted(self.streams)} do not match encoder "
                f"outputs {sorted(embeddings)}")
        cache = {}
        single = None
        for name, emb in embeddings.items():
            stream = self.streams[name]
            cache[name] = {
                "emb": emb,
                "k": reshape_by_heads(stream.Wk(emb), self.num_heads),
                "v": reshape_by_heads(stream.Wv(emb), self.num_heads),
            }
            single = emb if single is None else single + emb
        self._tls.cache = cache
        self._tls.single_key = single.transpose(1, 2)
        # shape: (batch, embed, n)

    def forward(self, first_idx, last_idx, ninf_mask, load=None):
        """Selection logits for one decode step.

        first_idx/last_idx: (batch, n_traj) node indices, or None before the
        first selection (the learnable placeholder stands in).
        ninf_mask: (batch, n_traj, n) additive mask.
        load: optional (batch, n_traj) remaining capacity, already normalized.
        """
        caches = getattr(self._tls, "cache", None)
        if caches is None:
            raise ConfigurationError("set_instance must be called before decoding")
        q = None
        for name, cache in caches.items():
            stream = self.streams[name]
            emb = cache["emb"]
            batch, n, d = emb.shape
            if first_idx is None:
                h_first = stream.placeholder.expand(batch, ninf_mask.size(1), d)
                h_last = h_first
            else:
                gather_first = first_idx[..., None].expand(-1, -1, d)
                gather_last = last_idx[..., None].expand(-1, -1, d)
                h_first = emb.gather(1, gather_first)
                h_last = emb.gather(1, gather_last)
            q_stream = (reshape_by_heads(stream.Wq_first(h_first), self.num_heads)
                        + reshape_by_heads(stream.Wq_last(h_last), self.num_heads))
            q = q_stream if q is None else q + q_stream
        if load is not None:
            q = q + reshape_by_heads(self.capacity_proj(load[..., None]), self.num_heads)
        # q shape: (batch, head, n_traj, key_dim)

        out = None
        for name, cache in caches.items():
            att = multi_head_attention(q, cache["k"], cache["v"], ninf_mask)
            combined = self.streams[name].combine(att)
            out = combined if out is None else out + combined
        # out shape: (batch, n_traj, embed)

        score = torch.matmul(out, self._tls.single_key) / math.sqrt(self.embed_dim)
        logits = self.logit_clip * torch.tanh(score) + ninf_mask
        return logits
        # shape: (batch, n_traj, n)


class RoutingPolicy(nn.Module):
    """Complete policy: input embedding, both encoders, dual-stream decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim

        if config.variant == EDGE_INPUT:
            if config.use_precoder:
                self.precoder = Precoder(config)
            else:
                # fallback input: each node is described by its sorted
                # k nearest distances (zero-padded for tiny instances)
                if config.use_graph_encoder:
                    self.knn_proj_graph = nn.Linear(config.k_neighbors, d)
                if config.use_node_encoder:
                    self.knn_proj_node = nn.Linear(config.k_neighbors, d)
        else:
            if config.use_graph_encoder:
                self.coord_proj_graph = nn.Linear(NODE_FEATURE_DIM, d)
            if config.use_node_encoder:
                self.coord_proj_node = nn.Linear(NODE_FEATURE_DIM, d)

        if config.use_graph_encoder:
            self.graph_encoder = GraphEncoder(config)
        if config.use_node_encoder:
            self.node_encoder = NodeEncoder(config)
        self.decoder = DualStreamDecoder(config)

    # -- encoding ---------------------------------------------------------

    def encoder_inputs(self, dist, onehot_idx=None, node_features=None):
        """Per-stream encoder inputs according to the configured variant.

        Returns a dict mapping enabled stream name -> (batch, n, embed).
        """
        cfg = self.config
        out = {}
        if cfg.variant == EDGE_INPUT:
            if cfg.use_precoder:
                if onehot_idx is None:
                    raise ConfigurationError(
                        "edge_input with precoder needs a one-hot assignment")
                shared = self.precoder(dist, onehot_idx)
                for name in cfg.streams:
                    out[name] = shared
            else:
                feats = self._knn_features(dist)
                if cfg.use_graph_encoder:
                    out["graph"] = self.knn_proj_graph(feats)
                if cfg.use_node_encoder:
                    out["node"] = self.knn_proj_node(feats)
        else:
            if node_features is None:
                raise ConfigurationError("node_input variant needs node features")
            if cfg.use_graph_encoder:
                out["graph"] = self.coord_proj_graph(node_features)
            if cfg.use_node_encoder:
                out["node"] = self.coord_proj_node(node_features)
        return out

    def _knn_features(self, dist):
        # sorted off-diagonal distances, lowest first, padded to k_neighbors
        batch, n, _ = dist.shape
        k = self.config.k_neighbors
        eye = torch.eye(n, dtype=torch.bool, device=dist.device)
        masked = dist.masked_fill(eye, float("inf"))
        sorted_d, _ = torch.sort(masked, dim=2)
        take = min(k, n - 1)
        feats = sorted_d[:, :, :take]
        if take < k:
            pad = torch.zeros(batch, n, k - take, dtype=dist.dtype, device=dist.device)
            feats = torch.cat([feats, pad], dim=2)
        return feats
        # shape: (batch, n, k_neighbors)

    def encode(self, dist, adj_code, onehot_idx=None, node_features=None):
        """Run both encoders; returns {stream: (batch, n, embed)}."""
        inputs = self.encoder_inputs(dist, onehot_idx, node_features)
        out = {}
        if self.config.use_graph_encoder:
            out["graph"] = self.graph_encoder(inputs["graph"], dist, adj_code)
        if self.config.use_node_encoder:
            out["node"] = self.node_encoder(inputs["node"])
        return out

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    @property
    def device(self):
        return next(self.parameters()).device


def build_policy(config: ModelConfig, seed: int = 0) -> RoutingPolicy:
    """Deterministically initialized policy."""
    torch.manual_seed(seed)
    return RoutingPolicy(config)
