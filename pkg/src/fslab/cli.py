"""``fslab`` command line: gen-data, train, eval, stylize, cluster, report.

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures. Outputs are staged and only moved into place on success.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from fslab import contrastive as C
from fslab.config import ExperimentConfig, ResultRecord, read_results, write_results
from fslab.cross_domain import StylizationJob, stylize_dataset, union
from fslab.data import DatasetManifest, generate_synthetic, load_dataset, save_dataset
from fslab.errors import ConfigError
from fslab.protonet import (BlockSpec, Embedder, EmbedderConfig, ProtoNet, evaluate, pretrain_classifier,
                            train_episodic)
from fslab.stylemix import StyleMixHook

log = logging.getLogger("fslab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# -- staging ------------------------------------------------------------------------

@contextmanager
def staged_dir(out: Path):
    """Yield a scratch directory whose contents replace ``out``'s on success; removed on failure."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = out.parent / f".{out.name}.partial"
    shutil.rmtree(stage, ignore_errors=True)
    stage.mkdir()
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in stage.iterdir():
        dest = out / item.name
        if dest.is_dir():
            shutil.rmtree(dest)
        os.replace(item, dest)
    stage.rmdir()


@contextmanager
def staged_file(out: Path):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial"
    try:
        yield tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, out)


# -- experiment pieces ---------------------------------------------------------------

def load_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    return load_dataset(cfg["data.path"]) if cfg["data.path"] else generate_synthetic(cfg.generator())


def _domains(cfg: ExperimentConfig, m: DatasetManifest) -> tuple[int, int]:
    source = int(cfg["gen.source_domain"])
    target = int(cfg["data.target_domain"])
    if not 0 <= target < len(m.domain_names):
        raise ConfigError(f"data.target_domain: {target} not in dataset with {len(m.domain_names)} domains")
    return source, target


def build_model(cfg: ExperimentConfig, in_channels: int) -> ProtoNet:
    ch = cfg["model.channels"]
    blocks = (BlockSpec(ch), BlockSpec(ch), BlockSpec(ch), BlockSpec(ch, pool=False))
    embedder = Embedder(EmbedderConfig(in_channels, blocks, seed=cfg["seed.train"]))
    attention = cfg.attention() if cfg["method"] == "attention" else None
    return ProtoNet(embedder, cfg["model.metric"], attention)


def _stylemix_hooks(cfg: ExperimentConfig) -> dict:
    mix = cfg.mix()
    return {s: [StyleMixHook(mix)] for s in cfg["stylemix.slots"]}


def test_hooks(cfg: ExperimentConfig):
    return _stylemix_hooks(cfg) if cfg["method"] == "stylemix" and cfg["stylemix.test_time"] else None


def fit(model: ProtoNet, pool: DatasetManifest, cfg: ExperimentConfig, hooks=None, curve: list | None = None,
        val_manifest: DatasetManifest | None = None) -> ProtoNet:
    """Pretraining (optional) then episodic training on the labeled source base classes."""
    pre = cfg.pretrain()
    if pre is not None:
        losses: list = []
        pretrain_classifier(model, pool, pre, mask=pool.mask(split="base", role="labeled_source"), history=losses)
        if curve is not None:
            curve.extend((i + 1, loss, float("nan")) for i, loss in enumerate(losses))
    ep = cfg.episodic()
    val = None
    if val_manifest is not None and ep.log_every and len(val_manifest.classes_in("val")) >= ep.n_way:
        def val(mod):
            return evaluate(mod, val_manifest, "val", ep.val_episodes, np.random.default_rng([cfg["seed.eval"], 7]),
                            n_way=ep.n_way, k_shot=ep.k_shot, q_queries=ep.q_queries)[0]
    windows: list = []
    train_episodic(model, pool, ep, split="base", role="labeled_source", hooks=hooks, val=val, curve=windows)
    if curve is not None:
        offset = len(curve)
        curve.extend((offset + i, loss, acc) for i, loss, acc in windows)
    return model


def evaluate_record(model: ProtoNet, m: DatasetManifest, cfg: ExperimentConfig, started: float) -> ResultRecord:
    _, target = _domains(cfg, m)
    domain = target if cfg["eval.domain"] < 0 else cfg["eval.domain"]
    mean, ci = evaluate(model, m, cfg["eval.split"], cfg["eval.episodes"], np.random.default_rng(cfg["seed.eval"]),
                        domain=domain, n_way=cfg["eval.n_way"], k_shot=cfg["eval.k_shot"],
                        q_queries=cfg["eval.q_queries"], hooks=test_hooks(cfg))
    return ResultRecord(cfg["method"], m.domain_names[domain], mean, ci, cfg["eval.episodes"],
                        time.perf_counter() - started, cfg.hash())


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])


def run_train(cfg: ExperimentConfig, out_dir: Path) -> ResultRecord:
    started = time.perf_counter()
    m = load_manifest(cfg)
    source_dom, target_dom = _domains(cfg, m)
    source = m.subset(m.mask(domain=source_dom))
    model = build_model(cfg, m.images.shape[1])
    method = cfg["method"]
    curve: list = []
    with staged_dir(out_dir) as stage:
        (stage / "config.txt").write_text(cfg.dump())
        if method == "stylize":
            labeled = m.subset(m.mask(split="base", domain=source_dom, role="labeled_source"))
            unlabeled = m.subset(m.mask(domain=target_dom, role="unlabeled_target"))
            stylized = stylize_dataset(StylizationJob(labeled, unlabeled, cfg["stylize.coefficient"],
                                                      cfg["seed.train"], cfg["stylize.copies"],
                                                      cfg["stylize.space"]))
            pool = union(labeled, stylized)
        else:
            pool = source
        hooks = _stylemix_hooks(cfg) if method == "stylemix" and not cfg["stylemix.test_time"] else None
        fit(model, pool, cfg, hooks, curve, val_manifest=source)
        _write_csv(stage / "curve.csv", ("epoch", "loss", "val_accuracy"), curve)
        if method == "contrastive":
            labeled = m.subset(m.mask(split="base", domain=source_dom, role="labeled_source"))
            unlabeled = m.subset(m.mask(domain=target_dom, role="unlabeled_target"))
            test = m.subset(m.mask(split=cfg["eval.split"], domain=target_dom))
            rounds: list = []
            (stage / "rounds").mkdir()

            def target_acc(mod):
                return evaluate(mod, test, cfg["eval.split"], 200, np.random.default_rng([cfg["seed.eval"], 11]),
                                n_way=cfg["eval.n_way"], k_shot=cfg["eval.k_shot"])[0]
            C.alternating_train(model, labeled, unlabeled, cfg.contrastive(), target_acc, stage / "rounds", rounds)
            _write_csv(stage / "rounds.csv", ("round", "n_clusters", "n_outliers", "source_loss", "target_accuracy"),
                       [(r.round, r.n_clusters, r.n_outliers, r.source_loss, r.target_accuracy) for r in rounds])
        model.save(stage / "model.fslt")
        record = evaluate_record(model, m, cfg, started)
        write_results(stage / "result.csv", [record])
    return record


def run_eval(cfg: ExperimentConfig, model_path: Path, out_dir: Path) -> ResultRecord:
    started = time.perf_counter()
    if not Path(model_path).is_file():
        raise ConfigError(f"--model: file not found: {model_path}")
    m = load_manifest(cfg)
    model = build_model(cfg, m.images.shape[1])
    model.load(model_path)
    with staged_dir(out_dir) as stage:
        (stage / "config.txt").write_text(cfg.dump())
        record = evaluate_record(model, m, cfg, started)
        write_results(stage / "result.csv", [record])
    return record


def run_stylize(cfg: ExperimentConfig, content_path: Path, style_path: Path, out: Path) -> DatasetManifest:
    for flag, p in (("--in", content_path), ("--style-set", style_path)):
        if not Path(p).is_file():
            raise ConfigError(f"{flag}: file not found: {p}")
    content = load_dataset(content_path)
    style = load_dataset(style_path)
    if "labeled_source" in set(content.roles):
        content = content.subset(content.mask(role="labeled_source"))
    if "unlabeled_target" in set(style.roles):
        style = style.subset(style.mask(role="unlabeled_target"))
    result = stylize_dataset(StylizationJob(content, style, cfg["stylize.coefficient"], cfg["seed.train"],
                                            cfg["stylize.copies"], cfg["stylize.space"]))
    with staged_file(out) as tmp:
        save_dataset(result, tmp)
    return result


def run_cluster(cfg: ExperimentConfig, model_path: Path | None, out_dir: Path) -> dict:
    m = load_manifest(cfg)
    _, target = _domains(cfg, m)
    model = build_model(cfg, m.images.shape[1])
    if model_path is not None:
        if not Path(model_path).is_file():
            raise ConfigError(f"--model: file not found: {model_path}")
        model.load(model_path)
    idx = np.flatnonzero(m.mask(domain=target, role="unlabeled_target"))
    feats = C.unit_features(model, m.images[idx])
    eps = C.eps_from_percentile(feats, cfg["cluster.min_pts"], cfg["cluster.eps_percentile"])
    a = C.dbscan(feats, eps, cfg["cluster.min_pts"])
    labels = m.class_ids[idx]
    purity = [np.bincount(labels[a.labels == k]).max() / (a.labels == k).sum() for k in range(a.n_clusters)]
    summary = {"n_points": len(idx), "eps": eps, "n_clusters": a.n_clusters, "n_outliers": a.n_outliers,
               "mean_purity": float(np.mean(purity)) if purity else float("nan")}
    with staged_dir(out_dir) as stage:
        (stage / "config.txt").write_text(cfg.dump())
        _write_csv(stage / "clusters.csv", ("sample_index", "class_id", "cluster", "core"),
                   zip(idx.tolist(), labels.tolist(), a.labels.tolist(), a.core.astype(int).tolist()))
        _write_csv(stage / "summary.csv", tuple(summary), [tuple(summary.values())])
    return summary


def run_report(inputs, out: Path | None) -> list[ResultRecord]:
    records = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files = sorted(p.rglob("result.csv"))
        elif p.is_file():
            files = [p]
        else:
            raise ConfigError(f"report: no such file or directory: {p}")
        for f in files:
            records.extend(read_results(f))
    records.sort(key=lambda r: (-r.mean_accuracy, r.method, r.config_hash))
    if out is not None:
        with staged_file(out) as tmp:
            write_results(tmp, records)
    else:
        write_results(sys.stdout, records)
    return records


# -- argument parsing ------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fslab", description="Few-shot classification experiments on synthetic domains.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset file")
    _common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model and evaluate it on the target domain")
    _common(p)
    p.add_argument("--method", choices=("protonet", "stylemix", "attention", "stylize", "contrastive", "baseline"))
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a saved model checkpoint")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("stylize", help="restyle labeled source images with unlabeled target styles")
    _common(p)
    p.add_argument("--coefficient", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--in", dest="content", type=Path, required=True)
    p.add_argument("--style-set", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cluster", help="DBSCAN diagnostics on unlabeled target embeddings")
    _common(p)
    p.add_argument("--eps-percentile", type=float)
    p.add_argument("--min-pts", type=int)
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="merge result.csv files into one table sorted by accuracy")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _resolve(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_keys = {"method": "method", "data": "data.path", "episodes": "eval.episodes",
                 "coefficient": "stylize.coefficient", "seed": "seed.train",
                 "eps_percentile": "cluster.eps_percentile", "min_pts": "cluster.min_pts"}
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = str(val)
    if args.command in ("train", "eval", "cluster"):
        overrides["output.dir"] = str(args.out)
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"--config: file not found: {args.config}")
    return ExperimentConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            run_report(args.inputs, args.out)
            return EXIT_OK
        cfg = _resolve(args)
        if args.command == "gen-data":
            with staged_file(args.out) as tmp:
                save_dataset(generate_synthetic(cfg.generator()), tmp)
        elif args.command == "train":
            rec = run_train(cfg, args.out)
            print(f"{rec.method} {rec.target_domain}: {rec.mean_accuracy:.4f} +- {rec.ci95:.4f}")
        elif args.command == "eval":
            rec = run_eval(cfg, args.model, args.out)
            print(f"{rec.method} {rec.target_domain}: {rec.mean_accuracy:.4f} +- {rec.ci95:.4f}")
        elif args.command == "stylize":
            run_stylize(cfg, args.content, args.style_set, args.out)
        elif args.command == "cluster":
            s = run_cluster(cfg, args.model, args.out)
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    except ConfigError as e:
        print(f"fslab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"fslab: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
