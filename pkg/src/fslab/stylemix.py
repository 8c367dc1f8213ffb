"""Channel style statistics, AdaIN, mixup and the StyleMix feature layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fslab import tensor as T
from fslab.errors import EpisodeError, ShapeError
from fslab.tensor import STD_EPS, Tensor


@dataclass
class StyleStats:
    mu: Tensor        # N, C
    sigma: Tensor     # N, C   (>= sqrt(eps))
    hw: tuple


@dataclass(frozen=True)
class MixConfig:
    alpha: float = 0.1
    p: float = 0.5
    scope: str = "within"      # within | cross (partner from another episode)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.scope not in ("within", "cross"):
            raise ValueError(f"scope must be 'within' or 'cross', got {self.scope!r}")


def _check_maps(x: Tensor, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be N,C,H,W, got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"{name} has no spatial positions: {x.shape}")


def _moments_4d(x: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    mu = T.mean(x, (2, 3), keepdims=True)
    return mu, T.std(x, (2, 3), keepdims=True, eps=eps)


def spatial_moments(x, eps: float = STD_EPS) -> StyleStats:
    """Per-(n, c) spatial mean and sqrt(population variance + eps)."""
    x = T.as_tensor(x)
    _check_maps(x)
    mu, sigma = _moments_4d(x, eps)
    n, c = x.shape[:2]
    return StyleStats(T.reshape(mu, (n, c)), T.reshape(sigma, (n, c)), x.shape[2:])


def _renormalize(x: Tensor, mu_x: Tensor, sigma_x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    # same expression for adain and style_mix so lambda=0 matches adain bit for bit
    return sigma * ((x - mu_x) / sigma_x) + mu


def adain(x, y, eps: float = STD_EPS) -> Tensor:
    """Give x the per-channel spatial mean/std of y."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    _check_maps(x)
    _check_maps(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"adain: content {x.shape} and style {y.shape} have different channel counts")
    if y.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"adain: style batch {y.shape[0]} does not match content batch {x.shape[0]}")
    mu_x, sigma_x = _moments_4d(x, eps)
    mu_y, sigma_y = _moments_4d(y, eps)
    return _renormalize(x, mu_x, sigma_x, mu_y, sigma_y)


def style_mix(x, y, lam, eps: float = STD_EPS) -> Tensor:
    """Re-style x with the lambda-blend of its own and y's channel statistics.

    ``lam`` is a scalar or a length-N vector (one coefficient per image).
    """
    x, y = T.as_tensor(x), T.as_tensor(y)
    _check_maps(x)
    _check_maps(y, "y")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"style_mix: {x.shape} and {y.shape} have different channel counts")
    lam_arr = np.asarray(lam, dtype=np.float64)
    if ((lam_arr < 0) | (lam_arr > 1)).any():
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    lam_t = Tensor(lam_arr.reshape(-1, 1, 1, 1) if lam_arr.ndim else lam_arr)
    mu_x, sigma_x = _moments_4d(x, eps)
    mu_y, sigma_y = _moments_4d(y, eps)
    one_minus = Tensor(1.0 - lam_t.data)
    mu = lam_t * mu_x + one_minus * mu_y
    sigma = lam_t * sigma_x + one_minus * sigma_y
    return _renormalize(x, mu_x, sigma_x, mu, sigma)


def input_mixup(x_i, y_i, x_j, y_j, lam: float):
    """Convex combination of two inputs and their (one-hot) labels."""
    x_i, y_i, x_j, y_j = map(T.as_tensor, (x_i, y_i, x_j, y_j))
    if x_i.shape != x_j.shape:
        raise ShapeError(f"input_mixup: inputs {x_i.shape} and {x_j.shape} differ")
    if y_i.shape != y_j.shape:
        raise ShapeError(f"input_mixup: labels {y_i.shape} and {y_j.shape} differ")
    lam = float(lam)
    return (T.scalar_mul(x_i, lam) + T.scalar_mul(x_j, 1.0 - lam),
            T.scalar_mul(y_i, lam) + T.scalar_mul(y_j, 1.0 - lam))


def sample_partners(episode_membership: np.ndarray, scope: str, rng: np.random.Generator) -> np.ndarray:
    """Uniform partner per image: another image of the same episode, or of a different one."""
    ep = np.asarray(episode_membership)
    n = len(ep)
    partners = np.empty(n, dtype=np.intp)
    if scope == "cross" and len(np.unique(ep)) < 2:
        raise EpisodeError("cross-episode StyleMix needs a batch holding at least two episodes")
    for i in range(n):
        pool = np.flatnonzero(ep == ep[i]) if scope == "within" else np.flatnonzero(ep != ep[i])
        if scope == "within":
            pool = pool[pool != i]
        if len(pool) == 0:
            partners[i] = i
        else:
            partners[i] = pool[rng.integers(len(pool))]
    return partners


def stylemix_layer(batch_features, episode_membership, config: MixConfig, rng: np.random.Generator,
                   eps: float = STD_EPS, return_plan: bool = False):
    """Per image with probability p: lambda ~ Beta(alpha, alpha), partner drawn per scope,
    features replaced by style_mix(x, partner, lambda). Other images pass through untouched.
    Labels are never touched.
    """
    x = T.as_tensor(batch_features)
    _check_maps(x)
    n = x.shape[0]
    if len(episode_membership) != n:
        raise ShapeError(f"{len(episode_membership)} membership tags for a batch of {n}")
    if config.scope == "cross" and len(np.unique(episode_membership)) < 2:
        raise EpisodeError("cross-episode StyleMix needs a batch holding at least two episodes")
    if config.p == 0.0:
        return (x, None) if return_plan else x
    mixed = rng.random(n) < config.p
    lam = np.clip(rng.beta(config.alpha, config.alpha, size=n), 0.0, 1.0)
    partners = sample_partners(episode_membership, config.scope, rng)
    lam = np.where(mixed, lam, 1.0)
    out = apply_style_mix_plan(x, partners, lam, mixed, eps)
    plan = {"mixed": mixed, "lam": lam, "partners": partners}
    return (out, plan) if return_plan else out


def apply_style_mix_plan(x: Tensor, partners: np.ndarray, lam: np.ndarray, mixed: np.ndarray,
                         eps: float = STD_EPS) -> Tensor:
    """Deterministic core of the layer, for fixed partners and coefficients."""
    mixed_f = np.asarray(mixed, dtype=np.float64).reshape(-1, 1, 1, 1)
    if not mixed_f.any():
        return x
    restyled = style_mix(x, T.take(x, partners, axis=0), np.asarray(lam), eps)
    if mixed_f.all():
        return restyled
    return Tensor(mixed_f) * restyled + Tensor(1.0 - mixed_f) * x


class StyleMixHook:
    """Embedder hook wrapping :func:`stylemix_layer`."""
    stochastic = True

    def __init__(self, config: MixConfig):
        self.config = config

    def __call__(self, feats: Tensor, ctx, rng: np.random.Generator) -> Tensor:
        membership = ctx.episode_ids if ctx is not None else np.zeros(feats.shape[0], dtype=np.int64)
        return stylemix_layer(feats, membership, self.config, rng)

    def __repr__(self):
        return f"StyleMixHook({self.config})"
