"""Scaled dot-product self-attention over spatial feature-map tokens.

A C x H x W map contributes H*W tokens of dimension C. Several maps are
joined by concatenating along H, so tokens are ordered (map, h, w).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fslab import tensor as T
from fslab.errors import ShapeError
from fslab.tensor import Tensor

MODES = ("class_support", "prototypes", "query_prototype", "combined")


@dataclass(frozen=True)
class AttentionConfig:
    mode: str = "class_support"
    slots: tuple = (4,)
    learned_projections: bool = False
    clip_norm: float | None = 10.0     # gradient norm cap while training; raw Q=K=V attention can blow up

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"attention mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_slots(self) -> bool:
        return self.mode in ("class_support", "combined")

    @property
    def refines_prototypes(self) -> bool:
        return self.mode in ("prototypes", "combined")

    @property
    def refines_queries(self) -> bool:
        return self.mode in ("query_prototype", "combined")


@dataclass
class TokenGrid:
    tokens: Tensor                   # L x D
    provenance: np.ndarray = field(repr=False)   # L x 3: (map index, h, w)
    map_shape: tuple = ()            # (C, H, W) of each source map


class Projections:
    """Optional learned Q/K/V maps, initialised at identity."""

    def __init__(self, dim: int, rng: np.random.Generator, noise: float = 0.01):
        self.q = Tensor(np.eye(dim) + rng.normal(0, noise, (dim, dim)), requires_grad=True)
        self.k = Tensor(np.eye(dim) + rng.normal(0, noise, (dim, dim)), requires_grad=True)
        self.v = Tensor(np.eye(dim) + rng.normal(0, noise, (dim, dim)), requires_grad=True)

    def parameters(self):
        return [self.q, self.k, self.v]


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V, batched over any leading axes."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention: query dim {Q.shape} and key dim {K.shape} differ")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values ({K.shape} vs {V.shape})")
    d_k = Q.shape[-1]
    scores = T.scalar_mul(T.matmul(Q, T.transpose(K, _swap_last(K.ndim))), 1.0 / np.sqrt(d_k))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def self_attention(tokens: Tensor, proj: Projections | None = None, return_weights: bool = False):
    if proj is None:
        return scaled_dot_attention(tokens, tokens, tokens, return_weights)
    return scaled_dot_attention(tokens @ proj.q, tokens @ proj.k, tokens @ proj.v, return_weights)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def maps_to_tokens(maps: Tensor) -> TokenGrid:
    """(K, C, H, W) maps -> (K*H*W, C) tokens, i.e. the maps concatenated along H."""
    if maps.ndim != 4:
        raise ShapeError(f"expected K,C,H,W maps, got {maps.shape}")
    K, C, H, W = maps.shape
    tokens = T.reshape(T.transpose(maps, (0, 2, 3, 1)), (K * H * W, C))
    prov = np.stack(np.meshgrid(np.arange(K), np.arange(H), np.arange(W), indexing="ij"), -1).reshape(-1, 3)
    return TokenGrid(tokens, prov, (C, H, W))


def tokens_to_maps(grid_tokens: Tensor, n_maps: int, map_shape: tuple) -> Tensor:
    C, H, W = map_shape
    return T.transpose(T.reshape(grid_tokens, (n_maps, H, W, C)), (0, 3, 1, 2))


def _grouped_tokens(maps: Tensor) -> Tensor:
    """(G, K, C, H, W) -> (G, K*H*W, C)."""
    G, K, C, H, W = maps.shape
    return T.reshape(T.transpose(maps, (0, 1, 3, 4, 2)), (G, K * H * W, C))


def _ungroup(tokens: Tensor, shape: tuple) -> Tensor:
    G, K, C, H, W = shape
    return T.transpose(T.reshape(tokens, (G, K, H, W, C)), (0, 1, 4, 2, 3))


def class_support_attention(per_class_features: Tensor, proj: Projections | None = None) -> Tensor:
    """Self-attend jointly over all positions of a class's K support maps.

    Accepts (K, C, H, W) for one class or (G, K, C, H, W) for G classes at once.
    """
    x = T.as_tensor(per_class_features)
    single = x.ndim == 4
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ShapeError(f"class_support_attention expects K,C,H,W or G,K,C,H,W, got {x.shape}")
    out = _ungroup(self_attention(_grouped_tokens(x), proj), x.shape)
    return T.reshape(out, out.shape[1:]) if single else out


def prototype_attention(prototypes: Tensor, proj: Projections | None = None) -> Tensor:
    """Self-attention across N prototype vectors (N x D); d_k = D."""
    p = T.as_tensor(prototypes)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ShapeError(f"prototype_attention expects N x D with N >= 1, got {p.shape}")
    return self_attention(p, proj)


def query_prototype_attention(query_map: Tensor, prototypes: Tensor, proj: Projections | None = None):
    """Joint self-attention over one query map and N prototype maps.

    ``query_map`` is C,H,W (or Q,C,H,W for a batch of queries, each attended
    separately); ``prototypes`` is N,C,H,W. Returns (refined query, refined
    prototypes) with shapes ([Q,]C,H,W) and ([Q,]N,C,H,W).
    """
    q, p = T.as_tensor(query_map), T.as_tensor(prototypes)
    single = q.ndim == 3
    if single:
        q = T.reshape(q, (1,) + q.shape)
    if q.ndim != 4 or p.ndim != 4 or q.shape[1:] != p.shape[1:]:
        raise ShapeError(f"query_prototype_attention: query {q.shape} vs prototypes {p.shape}")
    Q, N = q.shape[0], p.shape[0]
    joint = T.concat([T.reshape(q, (Q, 1) + q.shape[1:]),
                      p * Tensor(np.ones((Q, 1, 1, 1, 1)))], axis=1)   # Q, N+1, C, H, W
    out = _ungroup(self_attention(_grouped_tokens(joint), proj), joint.shape)
    rq, rp = out[:, 0], out[:, 1:]
    if single:
        return rq[0], rp[0]
    return rq, rp


class ClassSupportHook:
    """Embedder hook: per-class support attention at a block boundary; queries untouched."""
    stochastic = False

    def __init__(self, proj: Projections | None = None):
        self.proj = proj

    def __call__(self, feats: Tensor, ctx, rng=None) -> Tensor:
        if ctx is None or ctx.n_support == 0:
            return feats
        ns, way, shot = ctx.n_support, ctx.way, ctx.shot
        order = np.argsort(ctx.labels[:ns], kind="stable")
        sup = T.take(feats, order, axis=0)
        grouped = T.reshape(sup, (way, shot) + feats.shape[1:])
        refined = T.reshape(class_support_attention(grouped, self.proj), (ns,) + feats.shape[1:])
        inverse = np.argsort(order)
        pieces = [T.take(refined, inverse, axis=0)]
        if feats.shape[0] > ns:
            pieces.append(feats[ns:])
        return T.concat(pieces, axis=0)
