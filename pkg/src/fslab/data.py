"""Synthetic multi-domain image sets, meta-splits and N-way K-shot episodes.

Class identity lives in geometry: each class owns a fixed arrangement of
discs that is jittered, shifted and slightly rotated per sample. Domain
identity lives only in per-channel contrast/offset and an additive sinusoidal
texture, so every class is recoverable in every domain.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fslab.checkpoint import decode_tensors, encode_tensors
from fslab.errors import ChecksumError, EpisodeError, FormatError, ShapeError

SPLITS = ("base", "val", "novel")
ROLES = ("labeled_source", "unlabeled_target", "test_target", "unused")

HEADER_MAGIC = b"FSLH"


@dataclass(frozen=True)
class DomainStyle:
    """Per-domain offsets relative to the reference style, scaled by ``domain_gap``."""
    mean_shift: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (0.0, 0.0, 0.0)        # added to a unit contrast
    noise_amplitude: float = 0.0
    noise_frequency: float = 0.0


# Domain 0 is the reference (source) style; the others diverge from it.
DEFAULT_DOMAIN_STYLES = (
    DomainStyle(),
    DomainStyle((0.22, -0.2, 0.12), (-0.4, -0.3, -0.45), 0.26, 3.0),
    DomainStyle((-0.18, 0.15, -0.2), (0.2, -0.4, 0.3), 0.22, 2.0),
    DomainStyle((0.1, 0.2, -0.15), (-0.3, -0.3, -0.35), 0.12, 4.0),
)


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 50
    samples_per_class: int = 40
    channels: int = 3
    height: int = 16
    width: int = 16
    n_domains: int = 2
    domain_gap: float = 1.0
    domain_styles: tuple = DEFAULT_DOMAIN_STYLES
    base_noise_amplitude: float = 0.04
    base_noise_frequency: float = 2.0
    n_blobs: int = 3
    jitter: float = 0.9
    rotation_deg: float = 10.0
    split_fractions: tuple = (0.64, 0.16, 0.20)
    source_domain: int = 0
    seed: int = 0

    def style_for(self, domain: int) -> tuple[np.ndarray, np.ndarray, float, float]:
        """(channel shift, channel contrast, noise amplitude, noise frequency)."""
        st = self.domain_styles[domain]
        g = self.domain_gap
        shift = g * np.asarray(st.mean_shift, dtype=np.float64)[: self.channels]
        scale = 1.0 + g * np.asarray(st.scale, dtype=np.float64)[: self.channels]
        amp = self.base_noise_amplitude + g * st.noise_amplitude
        freq = self.base_noise_frequency + g * st.noise_frequency
        return shift, scale, amp, freq


@dataclass
class DatasetManifest:
    """Images plus per-sample class/domain tags, the class split and sample roles."""
    images: np.ndarray                 # N, C, H, W
    class_ids: np.ndarray              # N
    domain_ids: np.ndarray             # N
    class_names: list
    domain_names: list
    split_map: dict                    # class_id -> base | val | novel
    roles: np.ndarray                  # N, one of ROLES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=object)
        self.split_map = {int(k): v for k, v in self.split_map.items()}
        n = len(self.images)
        if not (len(self.class_ids) == len(self.domain_ids) == len(self.roles) == n):
            raise ShapeError("manifest arrays disagree on sample count")
        bad = set(self.split_map.values()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")
        missing = set(np.unique(self.class_ids).tolist()) - set(self.split_map)
        if missing:
            raise ValueError(f"classes without a split: {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (np.array_equal(self.images, other.images)
                and np.array_equal(self.class_ids, other.class_ids)
                and np.array_equal(self.domain_ids, other.domain_ids)
                and list(self.class_names) == list(other.class_names)
                and list(self.domain_names) == list(other.domain_names)
                and self.split_map == other.split_map
                and list(self.roles) == list(other.roles))

    @property
    def role_map(self) -> dict:
        return dict(enumerate(self.roles.tolist()))

    def classes_in(self, split: str) -> list[int]:
        return sorted(c for c, s in self.split_map.items() if s == split)

    def mask(self, split: str | None = None, domain: int | None = None,
             role: str | Sequence[str] | None = None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if split is not None:
            m &= np.isin(self.class_ids, self.classes_in(split))
        if domain is not None:
            m &= self.domain_ids == domain
        if role is not None:
            roles = [role] if isinstance(role, str) else list(role)
            m &= np.isin(self.roles, roles)
        return m

    def subset(self, mask_or_index) -> "DatasetManifest":
        idx = np.asarray(mask_or_index)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return DatasetManifest(self.images[idx], self.class_ids[idx], self.domain_ids[idx],
                               list(self.class_names), list(self.domain_names),
                               dict(self.split_map), self.roles[idx])

    def extend(self, images, class_ids, domain_ids, roles, domain_names=None) -> "DatasetManifest":
        return DatasetManifest(
            np.concatenate([self.images, images]),
            np.concatenate([self.class_ids, class_ids]),
            np.concatenate([self.domain_ids, domain_ids]),
            list(self.class_names), list(domain_names or self.domain_names),
            dict(self.split_map), np.concatenate([self.roles, np.asarray(roles, dtype=object)]))


def default_role(split: str, domain: int, source_domain: int = 0) -> str:
    if domain == source_domain:
        return "labeled_source"
    if split == "val":
        return "unlabeled_target"
    if split == "novel":
        return "test_target"
    return "unused"


# -- generator --------------------------------------------------------------------

def _class_layout(cfg: GeneratorConfig, class_id: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1, class_id])
    lo, hi = 0.2 * cfg.height, 0.8 * cfg.height
    centers = rng.uniform(lo, hi, size=(cfg.n_blobs, 2))
    radii = rng.uniform(0.1, 0.17, size=(cfg.n_blobs, 1)) * cfg.height
    return np.hstack([centers, radii])


def _render_glyph(cfg: GeneratorConfig, layout: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    theta = np.deg2rad(rng.normal(0.0, cfg.rotation_deg))
    shift = rng.uniform(-cfg.jitter, cfg.jitter, size=2)
    centers = layout[:, :2] + rng.normal(0.0, 0.35 * cfg.jitter, size=(len(layout), 2))
    radii = layout[:, 2] * rng.uniform(0.88, 1.12, size=len(layout))
    mid = np.array([(H - 1) / 2, (W - 1) / 2])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    centers = (centers - mid) @ rot.T + mid + shift
    hh, ww = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((H, W), dtype=bool)
    for (ch, cw), r in zip(centers, radii):
        mask |= (hh - ch) ** 2 + (ww - cw) ** 2 <= r * r
    return mask


def _texture(cfg: GeneratorConfig, amp: float, freq: float, rng: np.random.Generator) -> np.ndarray:
    """Per-channel oriented sinusoid with random phase; ``freq`` is cycles per image."""
    C, H, W = cfg.channels, cfg.height, cfg.width
    hh, ww = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = rng.uniform(0, np.pi, size=C)
    phase = rng.uniform(0, 2 * np.pi, size=C)
    out = np.empty((C, H, W))
    for c in range(C):
        proj = (hh * np.cos(theta[c]) + ww * np.sin(theta[c])) / H
        out[c] = amp * np.sin(2 * np.pi * freq * proj + phase[c])
    return out


def render_sample(cfg: GeneratorConfig, class_id: int, sample: int, domain: int) -> np.ndarray:
    glyph_rng = np.random.default_rng([cfg.seed, 2, class_id, sample])
    mask = _render_glyph(cfg, _class_layout(cfg, class_id), glyph_rng)
    gray = np.where(mask, 0.8, 0.2)
    shift, scale, amp, freq = cfg.style_for(domain)
    tex_rng = np.random.default_rng([cfg.seed, 3, class_id, sample, domain])
    img = 0.5 + scale[:, None, None] * (gray[None] - 0.5) + shift[:, None, None]
    img = img + _texture(cfg, amp, freq, tex_rng)
    return np.clip(img, 0.0, 1.0)


def assign_splits(n_classes: int, fractions: Sequence[float]) -> dict:
    n_base = int(round(fractions[0] * n_classes))
    n_val = int(round(fractions[1] * n_classes))
    split = {}
    for c in range(n_classes):
        split[c] = "base" if c < n_base else ("val" if c < n_base + n_val else "novel")
    return split


def generate_synthetic(cfg: GeneratorConfig) -> DatasetManifest:
    """Render every class in every domain; deterministic given ``cfg.seed``."""
    if cfg.n_classes < 2 or cfg.samples_per_class < 2:
        raise ValueError("need n_classes >= 2 and samples_per_class >= 2")
    if cfg.height < 8 or cfg.width < 8:
        raise ShapeError(f"image {cfg.height}x{cfg.width} too small to render glyphs (need >= 8x8)")
    if cfg.n_domains > len(cfg.domain_styles):
        raise ValueError(f"{cfg.n_domains} domains requested but only {len(cfg.domain_styles)} styles defined")
    split_map = assign_splits(cfg.n_classes, cfg.split_fractions)
    images, cls, dom, roles = [], [], [], []
    for d in range(cfg.n_domains):
        for c in range(cfg.n_classes):
            for s in range(cfg.samples_per_class):
                images.append(render_sample(cfg, c, s, d))
                cls.append(c)
                dom.append(d)
                roles.append(default_role(split_map[c], d, cfg.source_domain))
    return DatasetManifest(
        np.stack(images), np.array(cls), np.array(dom),
        [f"class_{c:03d}" for c in range(cfg.n_classes)],
        [f"domain_{d}" for d in range(cfg.n_domains)],
        split_map, np.array(roles, dtype=object))


# -- episodes ----------------------------------------------------------------------

@dataclass
class Episode:
    support: np.ndarray            # way*shot sample indices into the manifest
    support_labels: np.ndarray     # episode-local 0..way-1
    query: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    queries: int
    class_ids: np.ndarray          # local label -> global class id
    support_images: np.ndarray | None = field(default=None, repr=False)
    query_images: np.ndarray | None = field(default=None, repr=False)

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.support_images, self.query_images])

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.support, self.query])


class EpisodeSampler:
    """Draws episodes over a fixed pool of samples, grouped by class."""

    def __init__(self, manifest: DatasetManifest, split: str | None, k_shot: int, q_queries: int,
                 domain: int | None = None, role=None, with_images: bool = True):
        self.manifest = manifest
        self.k_shot, self.q_queries = k_shot, q_queries
        self.with_images = with_images
        pool = np.flatnonzero(manifest.mask(split, domain, role))
        by_class: dict[int, np.ndarray] = {}
        for c in np.unique(manifest.class_ids[pool]):
            by_class[int(c)] = pool[manifest.class_ids[pool] == c]
        need = k_shot + q_queries
        self.eligible = [c for c, idx in sorted(by_class.items()) if len(idx) >= need]
        self.by_class = by_class
        self.split = split

    def sample(self, n_way: int, rng: np.random.Generator) -> Episode:
        if len(self.eligible) < n_way:
            short = {c: len(i) for c, i in self.by_class.items() if c not in self.eligible}
            raise EpisodeError(
                f"split {self.split!r}: {n_way}-way episode needs {n_way} classes with >= "
                f"{self.k_shot + self.q_queries} samples, only {len(self.eligible)} qualify "
                f"(short classes: {short})")
        classes = rng.choice(self.eligible, size=n_way, replace=False)
        k, q = self.k_shot, self.q_queries
        sup, qry = [], []
        for c in classes:
            picked = rng.choice(self.by_class[int(c)], size=k + q, replace=False)
            sup.append(picked[:k])
            qry.append(picked[k:])
        support, query = np.concatenate(sup), np.concatenate(qry)
        ep = Episode(support, np.repeat(np.arange(n_way), k), query, np.repeat(np.arange(n_way), q),
                     n_way, k, q, np.asarray(classes, dtype=np.int64))
        if self.with_images:
            ep.support_images = self.manifest.images[support]
            ep.query_images = self.manifest.images[query]
        return ep


def sample_episode(manifest: DatasetManifest, split: str | None, n_way: int, k_shot: int,
                   q_queries: int, rng: np.random.Generator, domain: int | None = None,
                   role=None) -> Episode:
    """Sample an N-way K-shot episode: classes and samples without replacement."""
    return EpisodeSampler(manifest, split, k_shot, q_queries, domain, role).sample(n_way, rng)


# -- dataset files --------------------------------------------------------------

def save_dataset(manifest: DatasetManifest, path) -> None:
    """FSLT tensor block, then a JSON header section, then a SHA-256 of all preceding bytes."""
    tensors = {
        "images": manifest.images,
        "class_ids": manifest.class_ids.astype(np.float64),
        "domain_ids": manifest.domain_ids.astype(np.float64),
    }
    header = {
        "class_names": list(manifest.class_names),
        "domain_names": list(manifest.domain_names),
        "split_map": {str(k): v for k, v in sorted(manifest.split_map.items())},
        "roles": list(manifest.roles.tolist()),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(encode_tensors(tensors))
    body.write(HEADER_MAGIC)
    body.write(struct.pack("<I", len(raw)))
    body.write(raw)
    blob = body.getvalue()
    Path(path).write_bytes(blob + hashlib.sha256(blob).digest())


def load_dataset(path) -> DatasetManifest:
    blob = Path(path).read_bytes()
    if blob[:4] != b"FSLT":
        raise FormatError(f"{path}: bad magic, not an FSLT dataset")
    if len(blob) < 36 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted file)")
    body = blob[:-32]
    tensors, off = decode_tensors(body)
    if body[off:off + 4] != HEADER_MAGIC:
        raise FormatError(f"{path}: missing header section")
    (n,) = struct.unpack("<I", body[off + 4:off + 8])
    header = json.loads(body[off + 8:off + 8 + n].decode("utf-8"))
    return DatasetManifest(
        tensors["images"], tensors["class_ids"].astype(np.int64), tensors["domain_ids"].astype(np.int64),
        header["class_names"], header["domain_names"],
        {int(k): v for k, v in header["split_map"].items()},
        np.array(header["roles"], dtype=object))
