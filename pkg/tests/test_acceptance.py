"""Acceptance criteria, one test per criterion, each at its stated tolerance.

The experiment criteria (7-11) share one seeded synthetic benchmark and one
source-only baseline, built once per session. Every test records a PASS/FAIL
line that is repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from fslab import tensor as T
from fslab.attention import class_support_attention, prototype_attention, query_prototype_attention, \
    scaled_dot_attention, self_attention
from fslab.cli import main
from fslab.config import read_results
from fslab.contrastive import ContrastiveConfig, PrototypeMemory, alternating_train, contrastive_loss, dbscan
from fslab.cross_domain import StylizationJob, stylize_dataset, stylize_image, train_stylized
from fslab.data import DatasetManifest, GeneratorConfig, generate_synthetic
from fslab.gradcheck import grad_check
from fslab.protonet import (BlockSpec, Embedder, EmbedderConfig, EpisodicConfig, PretrainConfig, PrototypeSet,
                            ProtoNet, classify, evaluate)
from fslab.stylemix import MixConfig, StyleMixHook, adain, apply_style_mix_plan, style_mix

from oracles import reference_dbscan, same_partition

PRETRAIN = PretrainConfig(epochs=10)
EPISODIC = EpisodicConfig(episodes=300)
EVAL_EPISODES = 2000


def _probe(shape, seed=99):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape))


def _weighted(out):
    return T.sum_(out * _probe(out.shape))


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- 1: numerics ----------------------------------------------------------------------

def _numerics_cases():
    rng = np.random.default_rng(0)
    x4 = rng.normal(size=(2, 3, 6, 6))
    pos = rng.random((2, 3, 4, 4)) + 0.5
    labels = np.array([0, 2, 1])
    cases = {
        "add": (lambda a, b: _weighted(a + b), [x4, rng.normal(size=(3, 1, 1))]),
        "sub": (lambda a, b: _weighted(a - b), [x4, rng.normal(size=x4.shape)]),
        "mul": (lambda a, b: _weighted(a * b), [x4, rng.normal(size=(1, 3, 1, 6))]),
        "div": (lambda a, b: _weighted(a / (b * b + 1.0)), [x4, rng.normal(size=(2, 3, 1, 1))]),
        "scalar_mul": (lambda a: _weighted(T.scalar_mul(a, -2.5)), [x4]),
        "power": (lambda a: _weighted(T.power(a, 1.5)), [pos]),
        "sqrt": (lambda a: _weighted(T.sqrt(a)), [pos]),
        "exp": (lambda a: _weighted(T.exp(T.scalar_mul(a, 0.3))), [x4]),
        "log": (lambda a: _weighted(T.log(a)), [pos]),
        "relu": (lambda a: _weighted(T.relu(a)), [x4]),
        "matmul": (lambda a, b: _weighted(a @ b), [rng.normal(size=(5, 4)), rng.normal(size=(4, 6))]),
        "transpose": (lambda a: _weighted(T.transpose(a, (0, 2, 3, 1))), [x4]),
        "reshape": (lambda a: _weighted(T.reshape(a, (2, -1))), [x4]),
        "getitem": (lambda a: _weighted(a[:, 1:, ::2]), [x4]),
        "take": (lambda a: _weighted(T.take(a, [0, 0, 1], axis=0)), [x4]),
        "concat": (lambda a: _weighted(T.concat([a, T.scalar_mul(a, 2.0)], axis=2)), [x4]),
        "stack": (lambda a: _weighted(T.stack([a, T.relu(a)], axis=1)), [x4]),
        "sum": (lambda a: _weighted(T.sum_(a, axis=(2, 3))), [x4]),
        "mean": (lambda a: _weighted(T.mean(a, axis=1)), [x4]),
        "var": (lambda a: _weighted(T.var(a, axis=(2, 3))), [x4]),
        "std": (lambda a: _weighted(T.std(a, axis=(2, 3))), [x4]),
        "instance_norm": (lambda a: _weighted(T.instance_norm(a)), [x4]),
        "logsumexp": (lambda a: _weighted(T.logsumexp(a, axis=1)), [x4]),
        "softmax": (lambda a: _weighted(T.softmax(a, axis=-1)), [x4]),
        "log_softmax": (lambda a: _weighted(T.log_softmax(a, axis=1)), [x4]),
        "cross_entropy": (lambda a: T.cross_entropy(a, labels), [rng.normal(size=(3, 4))]),
        "l2_distance_pairwise": (lambda a, b: _weighted(T.l2_distance_pairwise(a, b)),
                                 [rng.normal(size=(5, 4)), rng.normal(size=(3, 4))]),
        "l2_normalize": (lambda a: _weighted(T.l2_normalize(a, axis=1)), [rng.normal(size=(5, 4))]),
        "cosine_similarity_pairwise": (lambda a, b: _weighted(T.cosine_similarity_pairwise(a, b)),
                                       [rng.normal(size=(5, 4)), rng.normal(size=(3, 4))]),
        "conv2d": (lambda a, w, b: _weighted(T.conv2d(a, w, b, stride=1, padding=1)),
                   [x4, rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]),
        "conv2d_strided": (lambda a, w: _weighted(T.conv2d(a, w, None, stride=2, padding=0)),
                           [x4, rng.normal(size=(2, 3, 3, 3))]),
        "max_pool2d": (lambda a: _weighted(T.max_pool2d(a, 2)), [x4]),
    }

    # composite losses
    emb = Embedder(EmbedderConfig(blocks=(BlockSpec(4), BlockSpec(4, pool=False)), seed=1))
    support_labels = np.repeat(np.arange(3), 2)
    query_labels = np.array([0, 1, 2, 1])

    def episodic_ce(images):
        f = emb(images)
        net = ProtoNet(emb)
        return T.cross_entropy(net.episode_logits(f[:6], support_labels, f[6:], 3), query_labels)
    cases["episodic_cross_entropy"] = (episodic_ce, [rng.random((10, 3, 8, 8))])

    e = _unit(rng, 6, 5)
    mem = PrototypeMemory(e[:2], e[2:4], e[4:], 0.1)
    cases["contrastive_fixed_memory"] = (
        lambda a: contrastive_loss(T.l2_normalize(a, axis=1), np.array([0, 3, 5]), mem), [rng.normal(size=(3, 5))])

    def stack_attention(maps, q):
        refined = class_support_attention(maps)
        protos = prototype_attention(T.reshape(T.mean(refined, axis=1), (3, -1)))
        rq, rp = query_prototype_attention(q, T.reshape(protos, (3, 2, 2, 2)))
        return _weighted(rq) + _weighted(rp) + _weighted(self_attention(T.reshape(rq, (2, 4))))
    cases["attention_stack"] = (stack_attention, [rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=(2, 2, 2))])

    partners, lam, mixed = np.array([2, 3, 0, 1]), rng.random(4), np.array([True, True, False, True])
    cases["stylemix_fixed_plan"] = (lambda a: _weighted(apply_style_mix_plan(a, partners, lam, mixed)),
                                    [rng.normal(size=(4, 3, 4, 4))])
    cases["style_mix_both_inputs"] = (lambda a, b: _weighted(style_mix(a, b, 0.3)),
                                      [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))])
    return cases


def test_criterion_01_numerics(criterion):
    start = time.perf_counter()
    worst, name = 0.0, ""
    for key, (fn, inputs) in _numerics_cases().items():
        err = grad_check(fn, inputs)
        if err > worst:
            worst, name = err, key
    elapsed = time.perf_counter() - start
    criterion(1, worst < 1e-6 and elapsed < 60,
              f"max relative gradient error {worst:.2e} ({name}), {elapsed:.1f}s")


# -- 2: style identities ---------------------------------------------------------------

def test_criterion_02_style_identities(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = rng.random((3, 4, 8, 8)), rng.random((3, 4, 8, 8))
        worst = max(worst,
                    np.abs(adain(x, x).data - x).max(),
                    np.abs(style_mix(x, y, 1.0).data - x).max(),
                    np.abs(style_mix(x, y, 0.0).data - adain(x, y).data).max(),
                    np.abs(stylize_image(x[0], y[0], 0.0) - x[0]).max())
    elapsed = time.perf_counter() - start
    criterion(2, worst <= 1e-9 and elapsed < 10, f"max deviation {worst:.2e} over 10 seeds, {elapsed:.2f}s")


# -- 3: attention contracts --------------------------------------------------------------

def test_criterion_03_attention_contracts(criterion):
    start = time.perf_counter()
    row_err = perm_err = hull_err = 0.0
    dirs = np.random.default_rng(1).normal(size=(64, 5))
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(9, 5))
        _, w = scaled_dot_attention(x, x, x, return_weights=True)
        row_err = max(row_err, np.abs(w.data.sum(1) - 1).max(), float(-(w.data.min())))
        perm = rng.permutation(9)
        out = self_attention(T.Tensor(x)).data
        perm_err = max(perm_err, np.abs(self_attention(T.Tensor(x[perm])).data - out[perm]).max())
        p_out, p_in = out @ dirs.T, x @ dirs.T
        hull_err = max(hull_err, float(np.max(np.maximum(p_out - p_in.max(0), p_in.min(0) - p_out))))
        maps = rng.normal(size=(4, 5, 2, 2))
        cs = class_support_attention(T.Tensor(maps)).data
        mp = rng.permutation(4)
        perm_err = max(perm_err, np.abs(class_support_attention(T.Tensor(maps[mp])).data - cs[mp]).max())
        t_in = maps.transpose(0, 2, 3, 1).reshape(-1, 5) @ dirs.T
        t_out = cs.transpose(0, 2, 3, 1).reshape(-1, 5) @ dirs.T
        hull_err = max(hull_err, float(np.max(np.maximum(t_out - t_in.max(0), t_in.min(0) - t_out))))
    elapsed = time.perf_counter() - start
    ok = row_err <= 1e-12 and perm_err <= 1e-12 and hull_err <= 1e-9 and elapsed < 10
    criterion(3, ok, f"row-sum {row_err:.1e}, equivariance {perm_err:.1e}, hull {hull_err:.1e}, {elapsed:.2f}s")


# -- 4: dbscan ----------------------------------------------------------------------------

def test_criterion_04_dbscan_oracle(criterion):
    start = time.perf_counter()
    combos = [(eps, mp) for eps in (0.05, 0.1, 0.2, 0.3, 0.5) for mp in (1, 3, 5, 10)]
    mismatches = 0
    for instance in range(20):
        rng = np.random.default_rng([instance, 404])
        centers = _unit(rng, 5, 4)
        X = centers[rng.integers(0, 5, 200)] + rng.normal(0, 0.12, (200, 4))
        for eps, mp in combos:
            want, _ = reference_dbscan(X, eps, mp)
            mismatches += not same_partition(dbscan(X, eps, mp).labels, want)
    elapsed = time.perf_counter() - start
    criterion(4, mismatches == 0 and elapsed < 60,
              f"{mismatches} mismatches over 20 instances x {len(combos)} settings, {elapsed:.1f}s")


# -- 5: contrastive loss ------------------------------------------------------------------

def test_criterion_05_contrastive_loss_oracle(criterion):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        e = _unit(rng, 7, 6)
        mem = PrototypeMemory(e[:3], e[3:5], e[5:], 0.05)
        f = _unit(rng, 1, 6)[0]
        logits = mem.entries @ f / mem.tau
        for pos in range(7):
            direct = -np.log(np.exp(logits[pos]) / np.exp(logits).sum())
            worst = max(worst, abs(contrastive_loss(f, pos, mem).item() - direct))
    single = PrototypeMemory(np.array([[0.0, 1.0]]), np.zeros((0, 2)), np.zeros((0, 2)), 0.05)
    single_loss = contrastive_loss(np.array([0.6, 0.8]), 0, single).item()
    tie = PrototypeMemory(np.array([[0.6, 0.8], [0.6, -0.8]]), np.zeros((0, 2)), np.zeros((0, 2)), 0.05)
    tie_loss = contrastive_loss(np.array([1.0, 0.0]), 0, tie).item()
    ok = worst <= 1e-9 and single_loss == 0.0 and tie_loss == np.log(2.0)
    criterion(5, ok, f"direct-formula gap {worst:.1e}, singleton {single_loss!r}, tie - log 2 = {tie_loss - np.log(2):.1e}")


# -- 6: classifier ------------------------------------------------------------------------

def test_criterion_06_classifier_oracle(criterion):
    rng = np.random.default_rng(6)
    disagreements = 0
    for _ in range(100):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 16))
        protos, q = rng.normal(size=(n, d)), rng.normal(size=(8, d))
        brute = np.array([min(range(n), key=lambda j: float(((row - protos[j]) ** 2).sum())) for row in q])
        disagreements += int((classify(q, PrototypeSet(T.Tensor(protos))).data.argmax(1) != brute).sum())
    # images carry no class information, so an untrained embedder can only guess
    n_cls, per = 10, 100
    noise = DatasetManifest(np.random.default_rng(0).random((n_cls * per, 3, 8, 8)), np.repeat(np.arange(n_cls), per),
                            np.zeros(n_cls * per), [f"c{i}" for i in range(n_cls)], ["noise"],
                            {i: "novel" for i in range(n_cls)}, ["test_target"] * (n_cls * per))
    mean, _, accs = evaluate(ProtoNet(Embedder(EmbedderConfig(seed=1))), noise, "novel", 500,
                             np.random.default_rng(0), q_queries=10, return_all=True)
    sigma = accs.std() / np.sqrt(500)
    ok = disagreements == 0 and abs(mean - 0.2) <= 3 * sigma
    criterion(6, ok, f"{disagreements} argmax disagreements; untrained accuracy {mean:.4f} "
                     f"(|diff| {abs(mean - 0.2):.4f} vs 3 sigma {3 * sigma:.4f})")


# -- shared benchmark -----------------------------------------------------------------------

def _roles(m):
    return (m.subset(m.mask(split="base", role="labeled_source")), m.subset(m.mask(role="unlabeled_target")),
            m.subset(m.mask(role="test_target")))


def _target_accuracy(model, test):
    return evaluate(model, test, None, EVAL_EPISODES, np.random.default_rng(1))[0]


@pytest.fixture(scope="session")
def benchmark():
    m = generate_synthetic(GeneratorConfig())
    src, unlabeled, test = _roles(m)
    start = time.perf_counter()
    base = train_stylized(EmbedderConfig(), src, src.subset([]), PRETRAIN, EPISODIC)
    return {"m": m, "src": src, "unlabeled": unlabeled, "test": test, "base": base,
            "base_acc": _target_accuracy(base, test), "train_time": time.perf_counter() - start}


@pytest.mark.slow
def test_criterion_07_in_domain(criterion):
    start = time.perf_counter()
    m = generate_synthetic(GeneratorConfig(domain_gap=0.0))
    src, _, test = _roles(m)
    model = train_stylized(EmbedderConfig(), src, src.subset([]), PRETRAIN, EPISODIC)
    acc = _target_accuracy(model, test)
    elapsed = time.perf_counter() - start
    criterion(7, acc >= 0.90 and elapsed < 600, f"gap 0 accuracy {acc:.4f} over {EVAL_EPISODES} episodes, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_cross_domain_drop(benchmark, criterion):
    m, base = benchmark["m"], benchmark["base"]
    source_acc = evaluate(base, m, "novel", EVAL_EPISODES, np.random.default_rng(1), domain=0)[0]
    drop = source_acc - benchmark["base_acc"]
    criterion(8, drop >= 0.10, f"source {source_acc:.4f} vs target {benchmark['base_acc']:.4f}, drop {drop:.4f}")


@pytest.mark.slow
def test_criterion_09_stylization(benchmark, criterion):
    src, unlabeled, test = benchmark["src"], benchmark["unlabeled"], benchmark["test"]
    stylized = stylize_dataset(StylizationJob(src, unlabeled, 1.0, seed=0))
    acc = _target_accuracy(train_stylized(EmbedderConfig(), src, stylized, PRETRAIN, EPISODIC), test)
    gain = acc - benchmark["base_acc"]
    criterion(9, gain >= 0.03, f"stylized {acc:.4f} vs baseline {benchmark['base_acc']:.4f}, gain {gain:+.4f}")


@pytest.mark.slow
def test_criterion_10_contrastive(benchmark, criterion):
    src, unlabeled, test = benchmark["src"], benchmark["unlabeled"], benchmark["test"]
    cfg = ContrastiveConfig(rounds=3, inner_iters=60)
    accs = {}
    for name, pool in (("full", unlabeled), ("half", unlabeled.subset(np.arange(0, len(unlabeled), 2)))):
        model = benchmark["base"].copy()
        alternating_train(model, src, pool, cfg)
        accs[name] = _target_accuracy(model, test)
    gain = accs["full"] - benchmark["base_acc"]
    ok = gain >= 0.05 and accs["full"] >= accs["half"]
    criterion(10, ok, f"contrastive {accs['full']:.4f} vs baseline {benchmark['base_acc']:.4f} (gain {gain:+.4f}); "
                      f"half unlabeled set {accs['half']:.4f}")


@pytest.mark.slow
def test_criterion_11_depth_degradation(benchmark, criterion):
    base, test = benchmark["base"], benchmark["test"]
    accs = []
    for slot in (1, 2, 3, 4):
        hooks = {slot: [StyleMixHook(MixConfig(p=1.0))]}
        accs.append(evaluate(base, test, None, 500, np.random.default_rng(1), hooks=hooks)[0])
    rises = [b - a for a, b in zip(accs, accs[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.005)
    criterion(11, ok, "accuracy by slot " + ", ".join(f"{a:.4f}" for a in accs))


# -- 12: determinism ----------------------------------------------------------------------------

def test_criterion_12_determinism(tmp_path, criterion):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("gen.n_classes=32\ngen.samples_per_class=20\nmodel.channels=8\npretrain.epochs=1\n"
                   "episodic.episodes=10\neval.episodes=100\ncontrastive.rounds=1\ncontrastive.inner_iters=2\n")
    same = []
    for method in ("baseline", "stylemix", "stylize", "contrastive"):
        runs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{method}_{rep}"
            assert main(["train", "--config", str(cfg), "--method", method, "--out", str(out)]) == 0
            (rec,) = read_results(out / "result.csv")
            runs.append((rec.without_time(), (out / "model.fslt").read_bytes(), (out / "curve.csv").read_bytes()))
        same.append(runs[0] == runs[1])
    criterion(12, all(same), f"{sum(same)}/{len(same)} methods reproduced records, checkpoints and curves exactly")
