"""Conv embedder, prototype classification, pretraining and episodic evaluation."""
from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from fslab import tensor as T
from fslab.attention import AttentionConfig, ClassSupportHook, Projections, prototype_attention, query_prototype_attention
from fslab.checkpoint import load_checkpoint, save_checkpoint
from fslab.data import DatasetManifest, Episode, EpisodeSampler
from fslab.errors import ConfigError, ShapeError
from fslab.optim import SGD, clip_grad_norm
from fslab.tensor import Tensor

log = logging.getLogger(__name__)

METRICS = ("sqeuclidean", "cosine")


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int = 32
    stride: int = 1
    pool: bool = True
    relu: bool = True


@dataclass(frozen=True)
class EmbedderConfig:
    in_channels: int = 3
    blocks: tuple = (BlockSpec(), BlockSpec(), BlockSpec(), BlockSpec(pool=False))
    seed: int = 0

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ConfigError("embedder needs at least one block")

    @property
    def n_slots(self) -> int:
        return len(self.blocks)


@dataclass
class HookContext:
    """Episode layout seen by hooks: rows are [support | query], support first."""
    episode_ids: np.ndarray
    labels: np.ndarray
    n_support: int = 0
    way: int = 0
    shot: int = 0

    @classmethod
    def for_episode(cls, ep: Episode) -> "HookContext":
        n = len(ep.support) + len(ep.query)
        labels = np.concatenate([ep.support_labels, ep.query_labels])
        return cls(np.zeros(n, dtype=np.int64), labels, len(ep.support), ep.way, ep.shot)


class Embedder:
    """Stack of conv3x3 -> ReLU -> maxpool blocks with hook points after each block.

    Hook slots are numbered 1..n_blocks; slot k sees the output of block k.
    """

    def __init__(self, config: EmbedderConfig = EmbedderConfig()):
        self.config = config
        rng = np.random.default_rng([config.seed, 17])
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = config.in_channels
        for spec in config.blocks:
            fan_in = c_in * 9
            self.weights.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.out_channels, c_in, 3, 3)),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(spec.out_channels), requires_grad=True))
            c_in = spec.out_channels

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"block{i + 1}.weight"] = w.data
            out[f"block{i + 1}.bias"] = b.data
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            for name, t in ((f"block{i + 1}.weight", w), (f"block{i + 1}.bias", b)):
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != t.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
                t.data = arr.copy()

    def copy(self) -> "Embedder":
        return copy.deepcopy(self)

    def validate_hooks(self, hooks: Mapping[int, Sequence] | None) -> None:
        for slot in (hooks or {}):
            if not 1 <= slot <= self.config.n_slots:
                raise ConfigError(f"hook slot {slot} invalid; valid slots are 1..{self.config.n_slots}")

    def forward(self, images, hooks: Mapping[int, Sequence] | None = None, ctx: HookContext | None = None,
                rng: np.random.Generator | None = None, upto: int | None = None) -> Tensor:
        self.validate_hooks(hooks)
        x = T.as_tensor(images)
        if x.ndim != 4:
            raise ShapeError(f"embedder input must be N,C,H,W, got {x.shape}")
        for k, (spec, w, b) in enumerate(zip(self.config.blocks, self.weights, self.biases), start=1):
            x = T.conv2d(x, w, b, stride=spec.stride, padding=1)
            if spec.relu:
                x = T.relu(x)
            if spec.pool and min(x.shape[2:]) >= 2:
                x = T.max_pool2d(x, 2)
            for hook in (hooks or {}).get(k, ()):
                x = hook(x, ctx, rng)
            if upto is not None and k == upto:
                break
        return x

    __call__ = forward


def embed(model, images, active_hooks=None, rng=None, ctx=None) -> Tensor:
    """Feature maps for ``images`` with hooks applied in slot order."""
    embedder = model.embedder if isinstance(model, ProtoNet) else model
    return embedder(images, active_hooks, ctx, rng)


@dataclass
class PrototypeSet:
    prototypes: Tensor          # N x D, or N x C x H x W for spatial methods
    metric: str = "sqeuclidean"


def compute_prototypes(support_features, labels, n_way: int, metric: str = "sqeuclidean") -> PrototypeSet:
    """Class k's prototype is the mean of its support features (any trailing shape)."""
    f = T.as_tensor(support_features)
    labels = np.asarray(labels)
    if len(labels) != f.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {f.shape[0]} support features")
    rows = []
    for k in range(n_way):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            raise ValueError(f"class {k} has no support features")
        rows.append(T.mean(T.take(f, idx, axis=0), axis=0, keepdims=True))
    return PrototypeSet(T.concat(rows, axis=0), metric)


def _flat(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0], -1)) if x.ndim != 2 else x


def classify(query_features, prototypes: PrototypeSet) -> Tensor:
    """Logits: negative squared L2 distance, or cosine similarity, to each prototype."""
    q, p = _flat(T.as_tensor(query_features)), _flat(prototypes.prototypes)
    if q.shape[1] != p.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} differs from prototype dim {p.shape[1]}")
    if prototypes.metric == "sqeuclidean":
        return -T.l2_distance_pairwise(q, p)
    if prototypes.metric == "cosine":
        return T.cosine_similarity_pairwise(q, p)
    raise ConfigError(f"unknown metric {prototypes.metric!r}")


class ProtoNet:
    """Embedder plus the episodic head (metric and optional spatial attention)."""

    def __init__(self, embedder: Embedder | None = None, metric: str = "sqeuclidean",
                 attention: AttentionConfig | None = None, cosine_scale: float = 10.0):
        if metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
        self.embedder = embedder or Embedder()
        self.metric = metric
        self.attention = attention
        self.cosine_scale = cosine_scale
        self.projections: dict[str, Projections] = {}
        if attention is not None:
            self.embedder.validate_hooks({s: () for s in attention.slots} if attention.uses_slots else None)
            if attention.learned_projections:
                rng = np.random.default_rng([self.embedder.config.seed, 23])
                chans = [b.out_channels for b in self.embedder.config.blocks]
                if attention.uses_slots:
                    for s in attention.slots:
                        self.projections[f"slot{s}"] = Projections(chans[s - 1], rng)
                if attention.refines_queries:
                    self.projections["query"] = Projections(chans[-1], rng)

    def parameters(self) -> list[Tensor]:
        params = self.embedder.parameters()
        for key in sorted(self.projections):
            params += self.projections[key].parameters()
        return params

    def attention_hooks(self) -> dict:
        if self.attention is None or not self.attention.uses_slots:
            return {}
        return {s: [ClassSupportHook(self.projections.get(f"slot{s}"))] for s in self.attention.slots}

    def needs_episode_embedding(self, extra_hooks=None) -> bool:
        return bool(extra_hooks) or bool(self.attention_hooks())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.embedder.state_dict()
        for key, proj in sorted(self.projections.items()):
            for n, t in zip("qkv", proj.parameters()):
                state[f"attn.{key}.{n}"] = t.data
        return state

    def load_state_dict(self, state) -> None:
        self.embedder.load_state_dict(state)
        for key, proj in self.projections.items():
            for n, t in zip("qkv", proj.parameters()):
                t.data = np.asarray(state[f"attn.{key}.{n}"], dtype=np.float64).copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))

    def copy(self) -> "ProtoNet":
        return copy.deepcopy(self)

    def episode_logits(self, support_feats: Tensor, support_labels, query_feats: Tensor, way: int) -> Tensor:
        """Prototype head on already-embedded maps (attention modes act here)."""
        att = self.attention
        protos = compute_prototypes(support_feats, support_labels, way, self.metric).prototypes
        if att is not None and att.refines_prototypes:
            shape = protos.shape
            protos = T.reshape(prototype_attention(_flat(protos)), shape)
        if att is not None and att.refines_queries:
            if query_feats.ndim != 4:
                raise ShapeError("query/prototype attention needs spatial feature maps")
            rq, rp = query_prototype_attention(query_feats, protos, self.projections.get("query"))
            Q, N = rp.shape[0], rp.shape[1]
            q = T.reshape(rq, (Q, 1, -1))
            p = T.reshape(rp, (Q, N, -1))
            if self.metric == "sqeuclidean":
                diff = q - p
                return -T.sum_(diff * diff, axis=2)
            qn, pn = T.l2_normalize(q, -1), T.l2_normalize(p, -1)
            return T.scalar_mul(T.sum_(qn * pn, axis=2), self.cosine_scale)
        logits = classify(query_feats, PrototypeSet(protos, self.metric))
        return T.scalar_mul(logits, self.cosine_scale) if self.metric == "cosine" else logits


def episode_step(model: ProtoNet, episode: Episode, hooks=None, rng=None) -> tuple[Tensor, float]:
    """Embed support+query, classify queries by prototype; returns (loss, accuracy)."""
    all_hooks = merge_hooks(model.attention_hooks(), hooks)
    ctx = HookContext.for_episode(episode)
    feats = model.embedder(episode.images, all_hooks, ctx, rng)
    ns = len(episode.support)
    logits = model.episode_logits(feats[:ns], episode.support_labels, feats[ns:], episode.way)
    loss = T.cross_entropy(logits, episode.query_labels)
    acc = float((logits.data.argmax(axis=1) == episode.query_labels).mean())
    return loss, acc


def merge_hooks(*hook_maps) -> dict:
    merged: dict[int, list] = {}
    for hm in hook_maps:
        for slot, hs in (hm or {}).items():
            merged.setdefault(int(slot), []).extend(hs)
    return dict(sorted(merged.items()))


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class EpisodicConfig:
    episodes: int = 600
    n_way: int = 5
    k_shot: int = 5
    q_queries: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_at: float = 2 / 3
    decay_factor: float = 0.1
    log_every: int = 100
    val_episodes: int = 100
    clip_norm: float | None = None     # joint gradient L2 norm cap; None defers to the attention config
    seed: int = 0


def batch_embed(model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Hook-free embeddings of many images, without building a graph."""
    embedder = model.embedder if isinstance(model, ProtoNet) else model
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out.append(embedder(images[i:i + batch]).data)
    return np.concatenate(out) if out else np.zeros((0,))


def pretrain_classifier(model: ProtoNet, manifest: DatasetManifest, config: PretrainConfig = PretrainConfig(),
                        mask: np.ndarray | None = None, history: list | None = None) -> ProtoNet:
    """Softmax classification over all classes in the pool; the linear head is discarded afterwards."""
    if mask is None:
        mask = manifest.mask(split="base")
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("pretraining pool is empty")
    classes = np.unique(manifest.class_ids[idx])
    remap = {int(c): i for i, c in enumerate(classes)}
    y_all = np.array([remap[int(c)] for c in manifest.class_ids[idx]])
    rng = np.random.default_rng([config.seed, 31])
    with T.no_grad():
        feat_dim = int(np.prod(model.embedder(manifest.images[idx[:1]]).shape[1:]))
    head_w = Tensor(rng.normal(0, np.sqrt(1.0 / feat_dim), (feat_dim, len(classes))), requires_grad=True)
    head_b = Tensor(np.zeros(len(classes)), requires_grad=True)
    params = model.embedder.parameters() + [head_w, head_b]
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    for epoch in range(config.epochs):
        order = rng.permutation(len(idx))
        losses = []
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            opt.zero_grad()
            feats = _flat(model.embedder(manifest.images[idx[b]]))
            loss = T.cross_entropy(feats @ head_w + head_b, y_all[b])
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        log.info("pretrain epoch %d loss %.4f", epoch + 1, np.mean(losses))
        if history is not None:
            history.append(float(np.mean(losses)))
    return model


def train_episodic(model: ProtoNet, manifest: DatasetManifest, config: EpisodicConfig = EpisodicConfig(),
                   split: str = "base", domain: int | None = None, role=None, hooks=None,
                   val: Callable[[ProtoNet], float] | None = None, curve: list | None = None) -> ProtoNet:
    """Meta-train on sampled episodes with SGD momentum and one step decay of the learning rate."""
    sampler = EpisodeSampler(manifest, split, config.k_shot, config.q_queries, domain, role)
    ep_rng = np.random.default_rng([config.seed, 41])
    hook_rng = np.random.default_rng([config.seed, 43])
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    decay_step = int(config.decay_at * config.episodes)
    clip = config.clip_norm
    if clip is None and model.attention is not None:
        clip = model.attention.clip_norm
    window = []
    for step in range(config.episodes):
        if step == decay_step and step > 0:
            opt.lr = config.lr * config.decay_factor
        episode = sampler.sample(config.n_way, ep_rng)
        opt.zero_grad()
        loss, _ = episode_step(model, episode, hooks, hook_rng)
        T.backward(loss)
        if clip is not None:
            clip_grad_norm(opt.params, clip)
        opt.step()
        window.append(loss.item())
        if config.log_every and (step + 1) % config.log_every == 0:
            val_acc = val(model) if val is not None else float("nan")
            log.info("episode %d loss %.4f val %.4f", step + 1, np.mean(window), val_acc)
            if curve is not None:
                curve.append(((step + 1) // config.log_every, float(np.mean(window)), val_acc))
            window = []
    return model


# -- evaluation ------------------------------------------------------------------------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FSL_THREADS", "1")))
    except ValueError:
        return 1


def _episode_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    root = np.random.SeedSequence(int(rng.integers(2**63)))
    return [np.random.default_rng(s) for s in root.spawn(n)]


def evaluate(model: ProtoNet, manifest: DatasetManifest, split: str = "novel", n_episodes: int = 2000,
             rng: np.random.Generator | None = None, domain: int | None = None, role=None,
             n_way: int = 5, k_shot: int = 5, q_queries: int = 15, hooks=None,
             return_all: bool = False):
    """Mean episode accuracy and 95% interval half-width 1.96 * std / sqrt(n).

    Without slot hooks the pool is embedded once and episodes are classified
    from cached features; otherwise every episode is embedded separately.
    Each episode draws from its own RNG stream, so results do not depend on
    the number of worker threads.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    sampler = EpisodeSampler(manifest, split, k_shot, q_queries, domain, role, with_images=False)
    streams = _episode_rngs(rng, n_episodes)
    per_episode = model.needs_episode_embedding(hooks)
    cache = None
    if not per_episode:
        pool = np.unique(np.concatenate([sampler.by_class[c] for c in sampler.eligible]))
        cache = np.zeros((len(manifest),) + batch_embed(model, manifest.images[pool[:1]]).shape[1:])
        cache[pool] = batch_embed(model, manifest.images[pool])
    all_hooks = merge_hooks(model.attention_hooks(), hooks)

    def run(i: int) -> float:
        r = streams[i]
        ep = sampler.sample(n_way, r)
        with T.no_grad():
            if per_episode:
                ep.support_images = manifest.images[ep.support]
                ep.query_images = manifest.images[ep.query]
                feats = model.embedder(ep.images, all_hooks, HookContext.for_episode(ep), r)
                sf, qf = feats[:len(ep.support)], feats[len(ep.support):]
            else:
                sf, qf = Tensor(cache[ep.support]), Tensor(cache[ep.query])
            logits = model.episode_logits(sf, ep.support_labels, qf, ep.way)
        return float((logits.data.argmax(axis=1) == ep.query_labels).mean())

    workers = worker_count()
    if workers > 1 and n_episodes > 1:
        with ThreadPoolExecutor(workers) as pool_ex:
            accs = np.array(list(pool_ex.map(run, range(n_episodes))))
    else:
        accs = np.array([run(i) for i in range(n_episodes)])
    mean, ci = float(accs.mean()), float(1.96 * accs.std() / np.sqrt(n_episodes))
    return (mean, ci, accs) if return_all else (mean, ci)


def mean_centroid_baseline(model: ProtoNet, labeled_source: DatasetManifest, test_target: DatasetManifest,
                           n_episodes: int = 2000, rng=None, **kw) -> float:
    """Frozen-embedder nearest-centroid accuracy on target episodes.

    ``labeled_source`` is what the embedder was trained on; it is not used
    for classification but must be non-empty.
    """
    if len(labeled_source) == 0:
        raise ValueError("labeled source set is empty")
    head = ProtoNet(model.embedder, model.metric)
    mean, _ = evaluate(head, test_target, None, n_episodes, rng, **kw)
    return mean
