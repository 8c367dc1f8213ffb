"""Transfer the style of unlabeled target images onto labeled source images.

Stylization works on pixels: each source image takes the per-channel mean and
std of a randomly paired target image (AdaIN), blended with the original by a
coefficient. A feature-space variant (small autoencoder fitted on the target
set) is available through ``StylizationJob(space="feature")``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from fslab import tensor as T
from fslab.data import DatasetManifest
from fslab.errors import ShapeError
from fslab.optim import SGD
from fslab.protonet import (Embedder, EmbedderConfig, EpisodicConfig, PretrainConfig, ProtoNet,
                            pretrain_classifier, train_episodic)
from fslab.stylemix import adain
from fslab.tensor import Tensor

log = logging.getLogger(__name__)


def stylize_image(content, style, coefficient: float = 1.0, clamp: bool = True) -> np.ndarray:
    """(1 - c) * content + c * adain(content, style), per channel; clamped to [0, 1] last.

    Works on single C,H,W images or N,C,H,W batches (style batch 1 or N).
    """
    if not 0.0 <= coefficient <= 1.0:
        raise ValueError(f"coefficient must lie in [0, 1], got {coefficient}")
    x = np.asarray(content, dtype=np.float64)
    y = np.asarray(style, dtype=np.float64)
    single = x.ndim == 3
    x4 = x[None] if single else x
    y4 = y[None] if y.ndim == 3 else y
    if x4.shape[1] != y4.shape[1]:
        raise ShapeError(f"stylize_image: content {x.shape} and style {y.shape} have different channel counts")
    if coefficient == 0.0:
        out = x4.copy()
    else:
        with T.no_grad():
            styled = adain(Tensor(x4), Tensor(y4)).data
        out = (1.0 - coefficient) * x4 + coefficient * styled
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


@dataclass
class StylizationJob:
    source: DatasetManifest
    target: DatasetManifest
    coefficient: float = 1.0
    seed: int = 0
    copies: int = 1
    space: str = "pixel"            # pixel | feature
    autoencoder_epochs: int = 30


def pair_targets(n_source: int, n_target: int, seed: int, copies: int = 1) -> np.ndarray:
    """Uniform target index for each (copy, source) pair."""
    rng = np.random.default_rng([seed, 53])
    return rng.integers(0, n_target, size=(copies, n_source))


def stylize_dataset(job: StylizationJob) -> DatasetManifest:
    """One stylized copy per source image (``copies`` to change), labels copied from the source."""
    if len(job.target) == 0:
        raise ValueError("unlabeled target set is empty")
    if len(job.source) == 0:
        raise ValueError("source set is empty")
    pairs = pair_targets(len(job.source), len(job.target), job.seed, job.copies)
    if job.space == "pixel":
        styler = lambda x, y: stylize_image(x, y, job.coefficient)
    elif job.space == "feature":
        ae = train_autoencoder(job.target.images, epochs=job.autoencoder_epochs, seed=job.seed)
        styler = lambda x, y: ae.stylize(x, y, job.coefficient)
    else:
        raise ValueError(f"unknown stylization space {job.space!r}")
    images = np.concatenate([styler(job.source.images, job.target.images[p]) for p in pairs])
    n = len(pairs) * len(job.source)
    names = list(job.source.domain_names)
    source_name = names[int(job.source.domain_ids[0])] if len(job.source) else "source"
    target_name = names[int(job.target.domain_ids[0])] if job.target.domain_ids[0] < len(names) else "target"
    stylized_name = f"{source_name}->{target_name}"
    if stylized_name not in names:
        names.append(stylized_name)
    dom = names.index(stylized_name)
    return DatasetManifest(images, np.tile(job.source.class_ids, len(pairs)), np.full(n, dom),
                           list(job.source.class_names), names, dict(job.source.split_map),
                           np.tile(job.source.roles, len(pairs)))


def union(source: DatasetManifest, stylized: DatasetManifest) -> DatasetManifest:
    """Originals first, stylized copies appended; domain names merged."""
    if len(stylized) == 0:
        return source
    return source.extend(stylized.images, stylized.class_ids, stylized.domain_ids, stylized.roles,
                         stylized.domain_names)


def train_stylized(embedder_config: EmbedderConfig, source: DatasetManifest, stylized: DatasetManifest,
                   pretrain: PretrainConfig | None = PretrainConfig(),
                   episodic: EpisodicConfig = EpisodicConfig(), metric: str = "sqeuclidean") -> ProtoNet:
    """Two-stage ProtoNet training on originals plus stylized copies, as extra samples of their classes."""
    if len(stylized) and not set(np.unique(stylized.class_ids)) <= set(np.unique(source.class_ids)):
        raise ValueError("stylized set contains classes absent from the source set")
    pool = union(source, stylized)
    model = ProtoNet(Embedder(embedder_config), metric)
    if pretrain is not None:
        pretrain_classifier(model, pool, pretrain, mask=pool.mask(split="base", role="labeled_source"))
    train_episodic(model, pool, episodic, split="base", role="labeled_source")
    return model


# -- feature-space variant ---------------------------------------------------------

class ConvAutoencoder:
    """conv3x3 -> ReLU encoder, conv3x3 decoder, same resolution."""

    def __init__(self, channels: int = 3, hidden: int = 16, seed: int = 0):
        rng = np.random.default_rng([seed, 59])
        self.enc_w = Tensor(rng.normal(0, np.sqrt(2 / (channels * 9)), (hidden, channels, 3, 3)), requires_grad=True)
        self.enc_b = Tensor(np.zeros(hidden), requires_grad=True)
        self.dec_w = Tensor(rng.normal(0, np.sqrt(1 / (hidden * 9)), (channels, hidden, 3, 3)), requires_grad=True)
        self.dec_b = Tensor(np.zeros(channels), requires_grad=True)

    def parameters(self):
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def encode(self, x):
        return T.relu(T.conv2d(T.as_tensor(x), self.enc_w, self.enc_b, padding=1))

    def decode(self, h):
        return T.conv2d(h, self.dec_w, self.dec_b, padding=1)

    def stylize(self, content, style, coefficient: float = 1.0) -> np.ndarray:
        with T.no_grad():
            hc = self.encode(content)
            hs = self.encode(style)
            h = T.scalar_mul(hc, 1.0 - coefficient) + T.scalar_mul(adain(hc, hs), coefficient)
            return np.clip(self.decode(h).data, 0.0, 1.0)


def train_autoencoder(images: np.ndarray, epochs: int = 30, lr: float = 0.05, batch: int = 64,
                      seed: int = 0) -> ConvAutoencoder:
    ae = ConvAutoencoder(images.shape[1], seed=seed)
    opt = SGD(ae.parameters(), lr, momentum=0.9)
    rng = np.random.default_rng([seed, 61])
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for s in range(0, len(order), batch):
            x = images[order[s:s + batch]]
            opt.zero_grad()
            diff = ae.decode(ae.encode(x)) - Tensor(x)
            loss = T.mean(diff * diff)
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        log.debug("autoencoder epoch %d mse %.5f", epoch + 1, np.mean(losses))
    return ae
