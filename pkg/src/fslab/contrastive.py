"""DBSCAN pseudo-labels and a unified contrastive loss over source classes,
target clusters and target outliers, trained by alternating cluster/update rounds.

Features entering this module are L2-normalized embeddings. The memory holds
one unit vector per source class (normalized mean of the class's features),
per target cluster (same), and per outlier (the outlier's own feature).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from fslab import tensor as T
from fslab.data import DatasetManifest
from fslab.errors import NumericalError, ShapeError
from fslab.optim import SGD
from fslab.protonet import ProtoNet, batch_embed
from fslab.tensor import Tensor

log = logging.getLogger(__name__)

OUTLIER = -1


@dataclass
class ClusterAssignment:
    labels: np.ndarray          # cluster index >= 0, or OUTLIER
    eps: float
    min_pts: int
    core: np.ndarray            # bool per point

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if (self.labels >= 0).any() else 0

    @property
    def n_outliers(self) -> int:
        return int((self.labels == OUTLIER).sum())


def pairwise_euclidean(points: np.ndarray) -> np.ndarray:
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def dbscan(points, eps: float, min_pts: int) -> ClusterAssignment:
    """Classical DBSCAN with Euclidean distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Points are scanned in index order; each unlabeled core
    point starts a new cluster that is grown breadth-first. A border point
    keeps the first cluster that reaches it.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ShapeError(f"dbscan needs a non-empty (n, d) array, got shape {X.shape}")
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got eps={eps}, min_pts={min_pts}")
    neighbors = pairwise_euclidean(X) <= eps
    core = neighbors.sum(axis=1) >= min_pts
    labels = np.full(len(X), OUTLIER, dtype=np.int64)
    cluster = 0
    for i in range(len(X)):
        if labels[i] != OUTLIER or not core[i]:
            continue
        labels[i] = cluster
        queue = [i]
        head = 0
        while head < len(queue):
            p = queue[head]
            head += 1
            for j in np.flatnonzero(neighbors[p]):
                if labels[j] == OUTLIER:
                    labels[j] = cluster
                    if core[j]:
                        queue.append(j)
        cluster += 1
    return ClusterAssignment(labels, float(eps), int(min_pts), core)


def eps_from_percentile(points, k: int = 4, percentile: float = 60.0) -> float:
    """``percentile``-th percentile over points of the distance to their k-th nearest other point."""
    X = np.asarray(points, dtype=np.float64)
    if len(X) < 2:
        return 1.0
    d = pairwise_euclidean(X)
    np.fill_diagonal(d, np.inf)
    k = min(k, len(X) - 1)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    return max(float(np.percentile(kth, percentile)), 1e-12)


# -- memory and loss ------------------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise NumericalError("zero-norm feature cannot be L2-normalized")
    return x / norms


@dataclass
class PrototypeMemory:
    source: np.ndarray                 # n_s x D  class centroids
    clusters: np.ndarray               # n_c x D  cluster centroids
    outliers: np.ndarray               # n_o x D  outlier instances
    tau: float = 0.05
    source_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    outlier_samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")

    @property
    def entries(self) -> np.ndarray:
        return np.concatenate([self.source, self.clusters, self.outliers])

    def __len__(self) -> int:
        return len(self.source) + len(self.clusters) + len(self.outliers)

    def source_index(self, class_id) -> np.ndarray:
        lookup = {int(c): i for i, c in enumerate(self.source_classes)}
        return np.array([lookup[int(c)] for c in np.atleast_1d(class_id)])

    def cluster_index(self, cluster) -> np.ndarray:
        return len(self.source) + np.atleast_1d(cluster).astype(np.int64)

    def outlier_index(self, sample) -> np.ndarray:
        lookup = {int(s): i for i, s in enumerate(self.outlier_samples)}
        return len(self.source) + len(self.clusters) + np.array([lookup[int(s)] for s in np.atleast_1d(sample)])

    def positives_for_target(self, samples, assignment: ClusterAssignment) -> np.ndarray:
        labels = assignment.labels[np.asarray(samples)]
        out = np.empty(len(labels), dtype=np.int64)
        clustered = labels >= 0
        if clustered.any():
            out[clustered] = self.cluster_index(labels[clustered])
        if (~clustered).any():
            out[~clustered] = self.outlier_index(np.asarray(samples)[~clustered])
        return out


def build_memory(source_feats, source_labels, target_feats, assignment: ClusterAssignment | None,
                 tau: float = 0.05) -> PrototypeMemory:
    """Class centroids, cluster centroids and outlier features, all unit-normalized.

    Order is stable: classes ascending, clusters ascending, outliers by sample index.
    """
    src = _normalize_rows(np.asarray(source_feats, dtype=np.float64)) if len(source_feats) else np.zeros((0, 0))
    labels = np.asarray(source_labels)
    classes = np.unique(labels)
    dim = src.shape[1] if src.size else np.asarray(target_feats).shape[-1]
    w = np.stack([src[labels == c].mean(axis=0) for c in classes]) if len(classes) else np.zeros((0, dim))
    w = _normalize_rows(w) if len(w) else w
    if assignment is None or len(target_feats) == 0:
        empty = np.zeros((0, dim))
        return PrototypeMemory(w, empty, empty.copy(), tau, classes)
    tgt = _normalize_rows(np.asarray(target_feats, dtype=np.float64))
    c = [tgt[assignment.labels == k].mean(axis=0) for k in range(assignment.n_clusters)]
    c = _normalize_rows(np.stack(c)) if c else np.zeros((0, dim))
    out_idx = np.flatnonzero(assignment.labels == OUTLIER)
    v = tgt[out_idx] if len(out_idx) else np.zeros((0, dim))
    return PrototypeMemory(w, c, v, tau, classes, out_idx)


def contrastive_loss(f, positive_ref, memory: PrototypeMemory) -> Tensor:
    """-log softmax over all memory entries of <f, entry>/tau, evaluated at the positive entry.

    ``f`` is one unit vector (D,) or a batch (B, D); ``positive_ref`` is the
    memory row index (or one index per batch row). Returns the mean loss.
    Computed through a max-shifted log-sum-exp of the logits relative to the positive.
    """
    if memory.tau <= 0:
        raise ValueError(f"temperature must be > 0, got {memory.tau}")
    f = T.as_tensor(f)
    single = f.ndim == 1
    if single:
        f = T.reshape(f, (1, -1))
    pos = np.atleast_1d(np.asarray(positive_ref, dtype=np.int64))
    if len(pos) != f.shape[0]:
        raise ShapeError(f"{len(pos)} positive indices for {f.shape[0]} features")
    if len(memory) == 0 or (pos < 0).any() or (pos >= len(memory)).any():
        raise IndexError(f"positive index {pos.tolist()} not in a memory of {len(memory)} entries")
    entries = memory.entries
    if entries.shape[1] != f.shape[1]:
        raise ShapeError(f"feature dim {f.shape[1]} vs memory dim {entries.shape[1]}")
    logits = T.scalar_mul(T.matmul(f, Tensor(entries.T)), 1.0 / memory.tau)
    picked = T.reshape(logits[np.arange(len(pos)), pos], (len(pos), 1))
    # shifting by the positive logit keeps ties exact: two equal terms give log 2
    return T.mean(T.logsumexp(logits - picked, axis=1))


# -- alternating training ---------------------------------------------------------------

@dataclass(frozen=True)
class ContrastiveConfig:
    rounds: int | None = None          # None: stop on convergence, at most max_rounds
    max_rounds: int = 20
    inner_iters: int = 100
    batch_size: int = 96
    tau: float = 0.05
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    min_pts: int = 4
    eps_percentile: float = 60.0
    memory_momentum: float | None = None   # None: full recomputation only at clustering time
    batch_weights: tuple = (1.0, 1.0, 1.0)  # source / clustered / outlier share of each batch
    seed: int = 0


@dataclass
class RoundRecord:
    round: int
    n_clusters: int
    n_outliers: int
    source_loss: float
    target_accuracy: float


def unit_features(model: ProtoNet, images: np.ndarray) -> np.ndarray:
    feats = batch_embed(model, images)
    return _normalize_rows(feats.reshape(len(feats), -1))


def _compose_batch(n_source: int, clustered: np.ndarray, outliers: np.ndarray, size: int,
                   rng: np.random.Generator, weights=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shares by ``weights`` (equal thirds by default) when every weighted pool is non-empty,
    else proportional to pool sizes over the non-empty weighted pools."""
    pools = [np.arange(n_source), clustered, outliers]
    wanted = [i for i in range(3) if weights[i] > 0]
    avail = [i for i in wanted if len(pools[i])]
    share = np.zeros(3, dtype=int)
    if not avail:
        return tuple(np.zeros(0, dtype=np.int64) for _ in range(3))
    if len(avail) == len(wanted):
        w = np.array([weights[i] if i in avail else 0.0 for i in range(3)])
    else:
        w = np.array([len(pools[i]) if i in avail else 0.0 for i in range(3)], dtype=float)
    share = np.floor(size * w / w.sum()).astype(int)
    share[avail[0]] += size - share.sum()
    picks = [rng.choice(p, size=min(s, len(p)), replace=False) if s else np.zeros(0, dtype=np.int64)
             for p, s in zip(pools, share)]
    return picks[0], picks[1], picks[2]


def alternating_train(model: ProtoNet, source: DatasetManifest, target: DatasetManifest,
                      config: ContrastiveConfig = ContrastiveConfig(),
                      evaluate_fn: Callable[[ProtoNet], float] | None = None,
                      checkpoint_dir=None, history: list | None = None) -> ProtoNet:
    """Repeat: embed target, DBSCAN, rebuild memory, then ``inner_iters`` SGD steps on the loss.

    ``source`` holds labeled source samples (class ids are the labels);
    ``target`` the unlabeled target samples. The memory is treated as a
    constant inside each round.
    """
    if len(target) == 0:
        raise ValueError("unlabeled target set is empty")
    rng = np.random.default_rng([config.seed, 71])
    opt = SGD(model.parameters(), config.lr, config.momentum, config.weight_decay)
    n_rounds = config.rounds if config.rounds is not None else config.max_rounds
    prev = None
    for r in range(1, n_rounds + 1):
        src_feats = unit_features(model, source.images)
        tgt_feats = unit_features(model, target.images)
        eps = eps_from_percentile(tgt_feats, config.min_pts, config.eps_percentile)
        assignment = dbscan(tgt_feats, eps, config.min_pts)
        if assignment.n_clusters == 0:
            log.warning("round %d: DBSCAN found no clusters; every target sample is an outlier", r)
        memory = build_memory(src_feats, source.class_ids, tgt_feats, assignment, config.tau)
        clustered = np.flatnonzero(assignment.labels >= 0)
        outliers = np.flatnonzero(assignment.labels == OUTLIER)
        src_pos_all = memory.source_index(source.class_ids)
        losses = []
        for _ in range(config.inner_iters):
            si, ci, oi = _compose_batch(len(source), clustered, outliers, config.batch_size, rng,
                                        config.batch_weights)
            ti = np.concatenate([ci, oi]).astype(np.int64)
            images = np.concatenate([source.images[si], target.images[ti]])
            pos = np.concatenate([src_pos_all[si], memory.positives_for_target(ti, assignment)]) if len(ti) \
                else src_pos_all[si]
            opt.zero_grad()
            feats = model.embedder(images)
            f = T.l2_normalize(T.reshape(feats, (len(images), -1)), axis=1)
            loss = contrastive_loss(f, pos, memory)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            if config.memory_momentum is not None:
                _momentum_update(memory, f.data, pos, config.memory_momentum)
        acc = evaluate_fn(model) if evaluate_fn is not None else float("nan")
        rec = RoundRecord(r, assignment.n_clusters, assignment.n_outliers,
                          float(np.mean(losses)) if losses else float("nan"), acc)
        log.info("round %d: %d clusters, %d outliers, loss %.4f, target acc %.4f",
                 r, rec.n_clusters, rec.n_outliers, rec.source_loss, rec.target_accuracy)
        if history is not None:
            history.append(rec)
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / f"round_{r:02d}.fslt")
        if config.rounds is None and prev is not None and _converged(prev, rec):
            break
        prev = rec
    return model


def _converged(prev: RoundRecord, cur: RoundRecord, tol: float = 0.01) -> bool:
    dc = abs(cur.n_clusters - prev.n_clusters) / max(prev.n_clusters, 1)
    da = abs(cur.target_accuracy - prev.target_accuracy) / max(abs(prev.target_accuracy), 1e-12)
    return dc < tol and da < tol


def _momentum_update(memory: PrototypeMemory, feats: np.ndarray, pos: np.ndarray, m: float) -> None:
    ns, nc = len(memory.source), len(memory.clusters)
    blocks = (memory.source, memory.clusters, memory.outliers)
    for f, p in zip(feats, pos):
        block = 0 if p < ns else (1 if p < ns + nc else 2)
        row = p - (0, ns, ns + nc)[block]
        vec = m * blocks[block][row] + (1.0 - m) * f
        blocks[block][row] = vec / np.linalg.norm(vec)
