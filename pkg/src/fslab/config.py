"""Flat ``dotted.key=value`` experiment configs and result records.

Every key has a declared type and default. A config file holds one
assignment per line; ``#`` starts a comment. The resolved config (all keys,
sorted) is what gets hashed and written next to results.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from fslab.attention import MODES, AttentionConfig
from fslab.contrastive import ContrastiveConfig
from fslab.data import GeneratorConfig
from fslab.errors import ConfigError
from fslab.protonet import METRICS, EpisodicConfig, PretrainConfig
from fslab.stylemix import MixConfig

METHODS = ("protonet", "stylemix", "attention", "stylize", "contrastive", "baseline")

_GEN_KEYS = ("n_classes", "samples_per_class", "channels", "height", "width", "n_domains", "domain_gap",
             "base_noise_amplitude", "base_noise_frequency", "n_blobs", "jitter", "rotation_deg",
             "split_fractions", "source_domain")


def _defaults() -> dict[str, tuple[type, object]]:
    spec: dict[str, tuple[type, object]] = {
        "method": (str, "protonet"),
        "output.dir": (str, ""),
        "data.path": (str, ""),
        "data.target_domain": (int, 1),
        "seed.data": (int, 0),
        "seed.train": (int, 0),
        "seed.eval": (int, 0),
        "model.metric": (str, "sqeuclidean"),
        "model.channels": (int, 32),
        "pretrain.enabled": (bool, True),
        "eval.episodes": (int, 2000),
        "eval.n_way": (int, 5),
        "eval.k_shot": (int, 5),
        "eval.q_queries": (int, 15),
        "eval.split": (str, "novel"),
        "eval.domain": (int, -1),            # -1: the target domain
        "stylemix.slots": (tuple, (1,)),
        "stylemix.test_time": (bool, False),
        "attention.slots": (tuple, (4,)),
        "stylize.coefficient": (float, 1.0),
        "stylize.copies": (int, 1),
        "stylize.space": (str, "pixel"),
        "cluster.eps_percentile": (float, 60.0),
        "cluster.min_pts": (int, 4),
    }
    gen = GeneratorConfig()
    for k in _GEN_KEYS:
        v = getattr(gen, k)
        spec[f"gen.{k}"] = (tuple if isinstance(v, tuple) else type(v), v)
    for prefix, cls in (("pretrain", PretrainConfig), ("episodic", EpisodicConfig),
                        ("contrastive", ContrastiveConfig)):
        inst = cls()
        for f in fields(cls):
            if f.name == "seed":
                continue
            v = getattr(inst, f.name)
            typ = tuple if isinstance(v, tuple) else (int if f.name == "rounds" else type(v))
            if f.name in ("memory_momentum", "clip_norm"):
                typ = float
            spec[f"{prefix}.{f.name}"] = (typ, v)
    mix = MixConfig()
    spec.update({"stylemix.alpha": (float, mix.alpha), "stylemix.p": (float, mix.p),
                 "stylemix.scope": (str, mix.scope)})
    att = AttentionConfig()
    spec.update({"attention.mode": (str, att.mode),
                 "attention.learned_projections": (bool, att.learned_projections),
                 "attention.clip_norm": (float, att.clip_norm)})
    return spec


DEFAULTS = _defaults()
_NULLABLE = {"contrastive.rounds", "contrastive.memory_momentum", "episodic.clip_norm", "attention.clip_norm"}


def _coerce(key: str, typ: type, raw: str):
    raw = raw.strip()
    if key in _NULLABLE and raw.lower() in ("none", ""):
        return None
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if typ is tuple:
        default = DEFAULTS[key][1]
        elem = type(default[0]) if default else float
        parts = [p for p in raw.strip("()[]").replace(",", " ").split() if p]
        return tuple(elem(p) for p in parts)
    if typ is float:
        return float(raw)
    if typ is int:
        return int(raw)
    return raw


def _render(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


def parse_assignments(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    values: tuple                       # sorted (key, value) pairs, fully resolved

    @classmethod
    def from_assignments(cls, raw: dict[str, str]) -> "ExperimentConfig":
        errors = []
        vals = {k: v for k, (_, v) in DEFAULTS.items()}
        for k, v in raw.items():
            if k not in DEFAULTS:
                errors.append(f"{k}: unknown key")
                continue
            try:
                vals[k] = _coerce(k, DEFAULTS[k][0], v)
            except ValueError as e:
                errors.append(f"{k}: {e}")
        cfg = cls(tuple(sorted(vals.items())))
        errors += cfg._problems()
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        raw = parse_assignments(Path(path).read_text().splitlines()) if path else {}
        raw.update(overrides or {})
        return cls.from_assignments(raw)

    def __getitem__(self, key):
        return dict(self.values)[key]

    def replace(self, **changes) -> "ExperimentConfig":
        raw = {k: _render(v) for k, v in self.values}
        raw.update({k.replace("__", "."): _render(v) for k, v in changes.items()})
        return ExperimentConfig.from_assignments(raw)

    def _problems(self) -> list[str]:
        v = dict(self.values)
        errs = []
        if v["method"] not in METHODS:
            errs.append(f"method: must be one of {METHODS}, got {v['method']!r}")
        if v["model.metric"] not in METRICS:
            errs.append(f"model.metric: must be one of {METRICS}")
        if v["attention.mode"] not in MODES:
            errs.append(f"attention.mode: must be one of {MODES}")
        if v["stylemix.scope"] not in ("within", "cross"):
            errs.append("stylemix.scope: must be within or cross")
        if v["method"] == "stylemix" and v["stylemix.scope"] == "cross" and not v["stylemix.test_time"]:
            errs.append("stylemix.scope: cross needs multi-episode batches; training sees one episode per step")
        if not 0 <= v["stylemix.p"] <= 1:
            errs.append("stylemix.p: must lie in [0, 1]")
        if v["stylemix.alpha"] <= 0:
            errs.append("stylemix.alpha: must be > 0")
        if not 0 <= v["stylize.coefficient"] <= 1:
            errs.append("stylize.coefficient: must lie in [0, 1]")
        if v["stylize.space"] not in ("pixel", "feature"):
            errs.append("stylize.space: must be pixel or feature")
        if v["contrastive.tau"] <= 0:
            errs.append("contrastive.tau: must be > 0")
        if v["eval.episodes"] < 1:
            errs.append("eval.episodes: must be >= 1")
        if not 0 <= v["data.target_domain"] < v["gen.n_domains"] and not v["data.path"]:
            errs.append(f"data.target_domain: must lie in [0, {v['gen.n_domains']})")
        if v["data.path"] and not Path(v["data.path"]).is_file():
            errs.append(f"data.path: file not found: {v['data.path']}")
        for key in ("stylemix.slots", "attention.slots"):
            if not v[key] or any(s < 1 for s in v[key]):
                errs.append(f"{key}: need block indices >= 1")
        return errs

    def dump(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in self.values)

    def hash(self) -> str:
        """SHA-256 of the resolved config; where outputs go is not part of the experiment."""
        body = "".join(f"{k}={_render(v)}\n" for k, v in self.values if k != "output.dir")
        return hashlib.sha256(body.encode()).hexdigest()

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values if k.startswith(prefix + ".")}

    # typed views
    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(**self.section("gen"), seed=self["seed.data"])

    def pretrain(self) -> PretrainConfig | None:
        if not self["pretrain.enabled"]:
            return None
        sec = self.section("pretrain")
        sec.pop("enabled")
        return PretrainConfig(**sec, seed=self["seed.train"])

    def episodic(self) -> EpisodicConfig:
        return EpisodicConfig(**self.section("episodic"), seed=self["seed.train"])

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(**self.section("contrastive"), seed=self["seed.train"])

    def mix(self) -> MixConfig:
        return MixConfig(self["stylemix.alpha"], self["stylemix.p"], self["stylemix.scope"])

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self["attention.mode"], self["attention.slots"], self["attention.learned_projections"],
                               self["attention.clip_norm"])


RESULT_FIELDS = ("method", "target_domain", "mean_accuracy", "ci95", "n_episodes", "wall_time", "config_hash")


@dataclass(frozen=True)
class ResultRecord:
    method: str
    target_domain: str
    mean_accuracy: float
    ci95: float
    n_episodes: int
    wall_time: float
    config_hash: str

    def row(self) -> dict:
        return {"method": self.method, "target_domain": self.target_domain,
                "mean_accuracy": f"{self.mean_accuracy:.6f}", "ci95": f"{self.ci95:.6f}",
                "n_episodes": str(self.n_episodes), "wall_time": f"{self.wall_time:.3f}",
                "config_hash": self.config_hash}

    @classmethod
    def from_row(cls, row: dict) -> "ResultRecord":
        return cls(row["method"], row["target_domain"], float(row["mean_accuracy"]), float(row["ci95"]),
                   int(row["n_episodes"]), float(row["wall_time"]), row["config_hash"])

    def without_time(self) -> "ResultRecord":
        return ResultRecord(self.method, self.target_domain, self.mean_accuracy, self.ci95,
                            self.n_episodes, 0.0, self.config_hash)


def write_results(dest, records) -> None:
    """Write records to a path or an open text stream."""
    if hasattr(dest, "write"):
        w = csv.DictWriter(dest, RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(r.row() for r in records)
        return
    with open(dest, "w", newline="") as fh:
        write_results(fh, records)


def read_results(path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        return [ResultRecord.from_row(r) for r in csv.DictReader(fh)]
