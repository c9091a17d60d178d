"""Building blocks: attention, mixed-score attention, gated graph conv,
per-instance normalization.

Shapes follow the convention (batch, node, channel) for node features and
(batch, node, node, channel) for edge features; attention internals use
(batch, head, node, head_dim).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def reshape_by_heads(qkv: torch.Tensor, head_num: int) -> torch.Tensor:
    # qkv shape: (batch, n, head_num * key_dim)
    batch, n = qkv.size(0), qkv.size(1)
    q = qkv.reshape(batch, n, head_num, -1)
    return q.transpose(1, 2)
    # shape: (batch, head_num, n, key_dim)


def multi_head_attention(q, k, v, ninf_mask=None):
    # q shape: (batch, head_num, n_q, key_dim)
    # k,v shape: (batch, head_num, n, key_dim)
    # ninf_mask shape: (batch, n_q, n) additive, 0 or -inf
    batch, head_num, n_q, key_dim = q.shape
    score = torch.matmul(q, k.transpose(2, 3)) / math.sqrt(key_dim)
    # shape: (batch, head_num, n_q, n)
    if ninf_mask is not None:
        score = score + ninf_mask[:, None, :, :]
    weights = F.softmax(score, dim=3)
    out = torch.matmul(weights, v)
    # shape: (batch, head_num, n_q, key_dim)
    return out.transpose(1, 2).reshape(batch, n_q, head_num * key_dim)
    # shape: (batch, n_q, head_num * key_dim)


class InstanceNorm(nn.Module):
    """Batch-norm-style affine normalization with statistics taken over the
    node positions of each instance separately (no running statistics, so
    train and eval behave identically and results are independent of how
    instances are batched together)."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        # x shape: (batch, ..., dim); stats over all middle dims, per instance
        shape = x.shape
        flat = x.reshape(shape[0], -1, shape[-1])
        mean = flat.mean(dim=1, keepdim=True)
        var = flat.var(dim=1, unbiased=False, keepdim=True)
        normed = (flat - mean) / torch.sqrt(var + self.eps)
        return (normed * self.weight + self.bias).reshape(shape)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, ff_dim: int):
        super().__init__()
        self.W1 = nn.Linear(embed_dim, ff_dim)
        self.W2 = nn.Linear(ff_dim, embed_dim)

    def forward(self, x):
        return self.W2(F.relu(self.W1(x)))


class MixedScoreAttention(nn.Module):
    """Multi-head attention whose logits are produced by a per-head two-layer
    MLP over (scaled dot-product score, raw edge weight) pairs.

    This is how edge weights enter the attention pattern: every head learns
    its own blend of similarity and distance.
    """

    def __init__(self, num_heads: int, mix_hidden: int):
        super().__init__()
        self.num_heads = num_heads
        self.mix_hidden = mix_hidden
        b1 = math.sqrt(1.0 / 2.0)           # fan-in of the 2-feature input
        b2 = math.sqrt(1.0 / mix_hidden)
        self.mix1_weight = nn.Parameter(torch.empty(num_heads, 2, mix_hidden).uniform_(-b1, b1))
        self.mix1_bias = nn.Parameter(torch.empty(num_heads, 1, mix_hidden).uniform_(-b1, b1))
        self.mix2_weight = nn.Parameter(torch.empty(num_heads, mix_hidden, 1).uniform_(-b2, b2))
        self.mix2_bias = nn.Parameter(torch.empty(num_heads, 1, 1).uniform_(-b2, b2))

    def mixed_scores(self, q, k, edge):
        # q shape: (batch, head, n_q, d); k: (batch, head, n_k, d)
        # edge shape: (batch, n_q, n_k)
        batch, head, n_q, d = q.shape
        n_k = k.size(2)
        dot = torch.matmul(q, k.transpose(2, 3)) / math.sqrt(d)
        two = torch.stack((dot, edge[:, None, :, :].expand_as(dot)), dim=4)
        # shape: (batch, head, n_q, n_k, 2)
        flat = two.reshape(batch, head, n_q * n_k, 2)
        hidden = F.relu(torch.matmul(flat, self.mix1_weight) + self.mix1_bias)
        mixed = torch.matmul(hidden, self.mix2_weight) + self.mix2_bias
        # shape: (batch, head, n_q * n_k, 1)
        return mixed.reshape(batch, head, n_q, n_k)

    def forward(self, q, k, v, edge, return_weights: bool = False):
        scores = self.mixed_scores(q, k, edge)
        weights = F.softmax(scores, dim=3)
        # shape: (batch, head, n_q, n_k)
        out = torch.matmul(weights, v)
        batch, head, n_q, d = out.shape
        out = out.transpose(1, 2).reshape(batch, n_q, head * d)
        if return_weights:
            return out, weights
        return out


class GatedGraphConvLayer(nn.Module):
    """Residual gated graph convolution over the k-nn graph.

    Node update: x_i <- x_i + relu(norm(W1 x_i + sum_j eta_ij * W2 x_j))
    Edge update: e_ij <- e_ij + relu(norm(W3 e_ij + W4 x_i + W5 x_j))
    with dense edge gates eta_ij = sigmoid(e_ij) normalized over the sparse
    neighbourhood of i (plus a small epsilon for stability).
    """

    def __init__(self, dim: int, gate_eps: float = 1e-5):
        super().__init__()
        self.gate_eps = gate_eps
        self.W1 = nn.Linear(dim, dim)
        self.W2 = nn.Linear(dim, dim)
        self.W3 = nn.Linear(dim, dim)
        self.W4 = nn.Linear(dim, dim)
        self.W5 = nn.Linear(dim, dim)
        self.norm_x = InstanceNorm(dim)
        self.norm_e = InstanceNorm(dim)

    def forward(self, x, e, neighbor_mask):
        # x shape: (batch, n, dim); e: (batch, n, n, dim)
        # neighbor_mask shape: (batch, n, n) bool, True where j is adjacent to i
        gates = torch.sigmoid(e) * neighbor_mask[..., None]
        eta = gates / (gates.sum(dim=2, keepdim=True) + self.gate_eps)
        # shape: (batch, n, n, dim)
        agg = (eta * self.W2(x)[:, None, :, :]).sum(dim=2)
        x_new = x + F.relu(self.norm_x(self.W1(x) + agg))
        e_new = e + F.relu(self.norm_e(
            self.W3(e) + self.W4(x)[:, :, None, :] + self.W5(x)[:, None, :, :]))
        return x_new, e_new


class ResidualMLP(nn.Module):
    """Plain MLP head with a residual connection over the whole stack, so a
    zero-initialized head acts as the identity."""

    def __init__(self, dim: int, depth: int):
        super().__init__()
        layers = []
        for i in range(depth):
            if i > 0:
                layers.append(nn.ReLU())
            layers.append(nn.Linear(dim, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.net(x)


class AttentionEncoderLayer(nn.Module):
    """Self-attention encoder layer: norm(x + MHA(x)), then norm(x + FF(x))."""

    def __init__(self, embed_dim: int, num_heads: int, ff_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.Wq = nn.Linear(embed_dim, embed_dim, bias=False)
        self.Wk = nn.Linear(embed_dim, embed_dim, bias=False)
        self.Wv = nn.Linear(embed_dim, embed_dim, bias=False)
        self.combine = nn.Linear(embed_dim, embed_dim)
        self.norm1 = InstanceNorm(embed_dim)
        self.ff = FeedForward(embed_dim, ff_dim)
        self.norm2 = InstanceNorm(embed_dim)

    def forward(self, x):
        # x shape: (batch, n, embed_dim)
        q = reshape_by_heads(self.Wq(x), self.num_heads)
        k = reshape_by_heads(self.Wk(x), self.num_heads)
        v = reshape_by_heads(self.Wv(x), self.num_heads)
        att = multi_head_attention(q, k, v)
        x = self.norm1(x + self.combine(att))
        x = self.norm2(x + self.ff(x))
        return x
