"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""
import hashlib
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ACCEPTANCE_LINES
from krisplite import kgstore as kg
from krisplite import models as m
from krisplite import pipeline as pl
from krisplite import synthvqa as sv
from krisplite import tensorcore as tc
from krisplite.cli import main

# seed-0 acceptance run: 829 of 1200 validation samples after 30 epochs
PINNED_VAL_ACCURACY = 829 / 1200


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


# ---------------------------------------------------------------- 1. gradients

def _away_from_zero(x):
    return np.sign(x) * (np.abs(x) + 0.1)


def _op_cases(rng):
    P = lambda *shape: tc.parameter(rng.normal(size=shape))
    probe = lambda shape: rng.normal(size=shape)
    a, b, c = P(3, 4), P(3, 4), P(4,)
    x3, w3 = P(2, 3, 4), P(2, 4, 2)
    r = tc.parameter(_away_from_zero(rng.normal(size=(3, 4))))
    mask = np.array([[True, False, True], [False, True, True]])
    cond = rng.random((3, 4)) < 0.5
    d = 8
    att = {n: tc.parameter(rng.normal(size=(d, d) if n[0] == "w" else (d,)) * 0.5) for n in tc.ATTENTION_PARAMS}
    q, kv = P(2, 3, d), P(2, 4, d)
    kmask = np.array([[True, True, True, False], [True, False, False, False]])
    gain, bias = P(4), P(4)
    logits, targets = P(5, 7), rng.integers(0, 7, 5)
    W, bl = P(4, 6), P(6)
    pr = {k: probe(s) for k, s in [("34", (3, 4)), ("234", (2, 3, 4)), ("232", (2, 3, 2)), ("24", (2, 4)),
                                   ("38", (3, 8)), ("36", (3, 6)), ("43", (4, 3)), ("12", (12,)),
                                   ("att", (2, 3, d))]}
    lin = lambda y, key: tc.sum_all(tc.mul(y, pr[key]))
    return {
        "add": (lambda: lin(tc.add(a, c), "34"), [a, c]),
        "sub": (lambda: lin(tc.sub(a, b), "34"), [a, b]),
        "mul": (lambda: lin(tc.mul(a, c), "34"), [a, c]),
        "scale": (lambda: lin(tc.scale(a, -1.7), "34"), [a]),
        "relu": (lambda: lin(tc.relu(r), "34"), [r]),
        "where": (lambda: lin(tc.where(cond, a, b), "34"), [a, b]),
        "reshape": (lambda: lin(tc.reshape(a, (12,)), "12"), [a]),
        "transpose": (lambda: lin(tc.transpose(a, (1, 0)), "43"), [a]),
        "concat": (lambda: lin(tc.concat([a, b], axis=-1), "38"), [a, b]),
        "sum_all": (lambda: tc.sum_all(tc.mul(a, a)), [a]),
        "mean": (lambda: lin(tc.mean(x3, axis=1), "24"), [x3]),
        "masked_mean": (lambda: lin(tc.masked_mean(x3, mask), "24"), [x3]),
        "matmul": (lambda: lin(tc.matmul(x3, w3), "232"), [x3, w3]),
        "linear": (lambda: lin(tc.linear(a, W, bl), "36"), [a, W, bl]),
        "softmax": (lambda: lin(tc.softmax_rows(a), "34"), [a]),
        "softmax_masked": (lambda: lin(tc.softmax_rows(a, cond | np.eye(3, 4, dtype=bool)), "34"), [a]),
        "layer_norm": (lambda: lin(tc.layer_norm(a, gain, bias), "34"), [a, gain, bias]),
        "cross_entropy": (lambda: tc.cross_entropy(logits, targets), [logits]),
        "attention": (lambda: lin(tc.multi_head_attention(q, kv, att, tc.AttentionConfig(d, 4), kmask)[0], "att"),
                      [q, kv, *att.values()]),
    }


def _full_graph_loss(variant, rng):
    cfg = m.ModelConfig(variant, hidden_dim=4, answer_vocab_size=3, image_dim=5, question_dim=6,
                        knowledge_dim=3, num_heads=2, ffn_dim=3)
    params = m.init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for t in params.values():
        t.data = t.data + rng.normal(size=t.shape) * 0.1
    images = rng.normal(size=(2, 5))
    q = rng.normal(size=(2, 3, 6))
    qmask = np.array([[True, True, True], [True, True, False]])
    know = rng.normal(size=(2, 3, 3))
    kmask = np.array([[True, True, False], [False, False, False]])
    targets = rng.integers(0, 3, 2)
    return (lambda: tc.cross_entropy(m.forward_batch(params, cfg, images, q, qmask, know, kmask).logits,
                                     targets)), params.tensors


def test_criterion_1_gradient_correctness():
    started = time.perf_counter()
    worst_op, worst_graph = {}, {}

    @settings(max_examples=5, deadline=None, derandomize=True)
    @given(st.integers(0, 2**32 - 1))
    def ops(seed):
        for name, (fn, params) in _op_cases(np.random.default_rng(seed)).items():
            res = tc.grad_check(fn, params, eps=1e-4, tolerance=1e-4)
            worst_op[name] = max(worst_op.get(name, 0.0), res.max_rel_error)

    @settings(max_examples=4, deadline=None, derandomize=True)
    @given(st.integers(0, 2**32 - 1), st.sampled_from("AB"))
    def graphs(seed, variant):
        fn, params = _full_graph_loss(variant, np.random.default_rng(seed))
        res = tc.grad_check(fn, params, eps=1e-4, tolerance=1e-3)
        worst_graph[variant] = max(worst_graph.get(variant, 0.0), res.max_rel_error)

    ops()
    graphs()
    elapsed = time.perf_counter() - started
    op_err, graph_err = max(worst_op.values()), max(worst_graph.values())
    ok = op_err < 1e-4 and graph_err < 1e-3 and elapsed < 60 and len(worst_graph) == 2
    record(1, "gradient correctness", ok,
           f"{len(worst_op)} ops max rel err {op_err:.2e} (<1e-4), models A/B {graph_err:.2e} (<1e-3), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. retrieval oracle

def scan_oracle(triples, image_concepts, keywords, k):
    """Linear scan, no index: rank by (tier, -score, position), dedup, cap."""
    rows = []
    for pos, t in enumerate(triples):
        ends = {t.head, t.tail}
        n_hit = len(ends & (set(image_concepts) | set(keywords)))
        if not n_hit:
            continue
        image = bool(ends & set(image_concepts))
        score = t.weight * (2.0 if image else 1.0) + 0.5 * (n_hit - 1)
        rows.append((0 if image else 1, -score, pos))
    out, seen = [], set()
    for tier, neg, pos in sorted(rows):
        t = triples[pos]
        if (t.head, t.relation, t.tail) not in seen:
            seen.add((t.head, t.relation, t.tail))
            out.append((t, "image_concept" if tier == 0 else "question_keyword", -neg))
    return out[:k]


def test_criterion_2_retrieval_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    relations = ["AtLocation", "Antonym", "RelatedTo", "IsA", "UsedFor"]
    mismatches = queries = 0
    for _ in range(500):
        n_concepts = int(rng.integers(2, 40))
        names = [f"c{i}" for i in range(n_concepts)]
        triples = [kg.Triple(names[rng.integers(n_concepts)], relations[rng.integers(5)],
                             names[rng.integers(n_concepts)], float(rng.choice([0.0, 0.5, 1.0, 1.0, 2.0, 3.5])))
                   for _ in range(int(rng.integers(0, 201)))]
        index = kg.build_index(triples)
        for _ in range(4):
            images = list(rng.choice(names, int(rng.integers(0, 6))))
            keywords = list(rng.choice(names, int(rng.integers(0, 6))))
            k = int(rng.integers(1, 9))
            res = kg.retrieve(index, images, keywords, k)
            got = list(zip(res.triples, res.provenance, res.scores))
            mismatches += got != scan_oracle(triples, images, keywords, k)
            queries += 1
    elapsed = time.perf_counter() - started
    ok = mismatches == 0 and elapsed < 60
    record(2, "retrieval oracle equivalence", ok,
           f"500 graphs, {queries} queries, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. retrieval contract

def test_criterion_3_retrieval_contract():
    violations = []
    names = st.sampled_from([f"c{i}" for i in range(12)])
    triple = st.builds(kg.Triple, names, st.sampled_from(["AtLocation", "Antonym", "IsA"]), names,
                       st.floats(0, 5, allow_nan=False))

    @settings(max_examples=400, deadline=None, derandomize=True)
    @given(st.lists(triple, max_size=80), st.lists(names, max_size=6), st.lists(names, max_size=6))
    def prop(triples, images, keywords):
        res = kg.retrieve(kg.build_index(triples), images, keywords)
        tiers = [p == kg.IMAGE_CONCEPT for p in res.provenance]
        if len(res) > 5 or tiers != sorted(tiers, reverse=True):
            violations.append((triples, images, keywords))

    prop()
    ok = not violations
    record(3, "retrieval contract", ok, f"<=5 triples and image tier first; {len(violations)} violations")
    assert ok


# ---------------------------------------------------------------- 4. parameter budgets

def test_criterion_4_parameter_budgets():
    b = m.param_count(m.load_preset("model-b-daquar"))
    a = m.param_count(m.load_preset("model-a-vqa"))
    doc = (Path(__file__).resolve().parents[1] / "docs" / "parameter_budgets.md")
    documented = doc.exists() and f"{b:,}" in doc.read_text() and f"{a:,}" in doc.read_text()
    allocated = m.init_params(m.load_preset("model-b-daquar")).size == b
    ok = 3_300_000 <= b <= 4_000_000 and 23_000_000 <= a <= 27_000_000 and documented and allocated
    record(4, "parameter budgets", ok,
           f"model-b-daquar {b:,} in [3.3M, 4.0M], model-a-vqa {a:,} in [23M, 27M], documented={documented}")
    assert ok


# ---------------------------------------------------------------- 5. synthetic proof of concept

@pytest.fixture(scope="module")
def acceptance_run(tmp_path_factory):
    """gen -> train -> eval through the CLI, seed 0, default 2000 scenes x 3 questions, 30 epochs."""
    root = tmp_path_factory.mktemp("acceptance")
    data, ckpt = root / "data", root / "run" / "model-b.ckpt"
    assert main(["gen", "--seed", "0", "--scenes", "2000", "--questions-per-scene", "3", "--out", str(data)]) == 0
    started = time.perf_counter()
    assert main(["train", "--variant", "b", "--data", str(data), "--epochs", "30", "--seed", "0",
                 "--out", str(ckpt)]) == 0
    train_seconds = time.perf_counter() - started
    return {"data": data, "ckpt": ckpt, "seconds": train_seconds,
            "reports": pl.read_reports(ckpt.parent / "reports.jsonl"),
            "summary": json.loads((ckpt.parent / "summary.json").read_text())}


@pytest.mark.slow
def test_criterion_5_synthetic_proof_of_concept(acceptance_run, capsys):
    code = main(["eval", "--ckpt", str(acceptance_run["ckpt"]), "--data", str(acceptance_run["data"]),
                 "--split", "val"])
    metrics = json.loads(capsys.readouterr().out)
    acc = metrics["accuracy"]
    baseline = metrics["majority_baseline"]["accuracy"]
    epochs = len(acceptance_run["reports"])
    ok = (code == 0 and acc >= 0.60 and acc - baseline >= 0.25 and epochs <= 30
          and acceptance_run["seconds"] < 20 * 60)
    record(5, "synthetic proof of concept", ok,
           f"Model B val accuracy {acc:.4f} (>=0.60) vs majority {baseline:.4f} "
           f"(+{acc - baseline:.4f}, need +0.25), {epochs} epochs, train {acceptance_run['seconds']:.0f}s; "
           f"per type {json.dumps(metrics['per_type'], sort_keys=True)}")
    assert ok


@pytest.mark.slow
def test_acceptance_run_is_pinned(acceptance_run, capsys):
    # regression guards on the same run: pinned accuracy, and early reports improve
    main(["eval", "--ckpt", str(acceptance_run["ckpt"]), "--data", str(acceptance_run["data"])])
    acc = json.loads(capsys.readouterr().out)["accuracy"]
    assert acc == pytest.approx(PINNED_VAL_ACCURACY, abs=1e-12)
    first = [r["val_accuracy"] for r in acceptance_run["reports"][:3]]
    assert first[0] < first[1] < first[2]


# ---------------------------------------------------------------- 6. overfit one batch

def test_criterion_6_overfit_one_batch():
    started = time.perf_counter()
    ds = sv.build_benchmark(0, n_scenes=40)
    data = pl.prepare(ds.split("train")[:8], ds, kg.build_index(ds.kg_triples), ds.tables)
    accs = {}
    for variant in ("a", "b"):
        _, accs[variant] = pl.fit_batch(m.load_preset(f"model-{variant}-synth"), data, steps=200, seed=0)
    elapsed = time.perf_counter() - started
    ok = accs == {"a": 1.0, "b": 1.0} and elapsed < 60
    record(6, "overfit one batch", ok,
           f"200 steps on 8 samples: A {accs['a']:.3f}, B {accs['b']:.3f} (need 1.0), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 7. diagnostics

def test_criterion_7_diagnostics_fidelity():
    ds = sv.build_benchmark(0)
    index = kg.build_index(ds.kg_triples)
    stats = pl.analyze_retrieval(ds.samples, ds, index, ds.tables)
    # independent recount from the triple ids stored at generation time
    recount = Counter(ds.kg_triples[i].relation for s in ds.samples for i in s.triple_ids)
    mean_recount = sum(len(s.triple_ids) for s in ds.samples) / len(ds.samples)
    hist_ok = {r: c for r, (c, _) in stats.histogram.items()} == dict(recount)
    hist_ok &= abs(stats.mean_triples - mean_recount) < 1e-12
    cfg = m.load_preset("model-b-synth")
    preds = pl.predict(m.init_params(cfg, seed=1), cfg, pl.prepare(ds.split("val"), ds, index, ds.tables))
    fractions = [f for _, f in pl.analyze_bias(preds, ds.answers)]
    random_fr = [f for _, f in pl.analyze_bias(np.random.default_rng(0).integers(0, 26, 9999))]
    bias_ok = abs(sum(fractions) - 1) <= 1e-9 and abs(sum(random_fr) - 1) <= 1e-9
    ok = 0 < stats.mean_triples <= 5 and hist_ok and bias_ok
    record(7, "diagnostics fidelity", ok,
           f"mean triples/sample {stats.mean_triples:.3f} in (0, 5], histogram matches recount={hist_ok}, "
           f"bias fractions sum {sum(fractions):.12f}")
    assert ok


# ---------------------------------------------------------------- 8. determinism and persistence

def _digest(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


def test_criterion_8_determinism_and_persistence(tmp_path):
    runs = []
    for name in ("first", "second"):
        d = tmp_path / name
        assert main(["gen", "--seed", "11", "--scenes", "80", "--out", str(d / "data")]) == 0
        assert main(["train", "--variant", "b", "--data", str(d / "data"), "--epochs", "2", "--seed", "3",
                     "--out", str(d / "run" / "m.ckpt")]) == 0
        runs.append((_digest(sorted((d / "data").iterdir())),
                     _digest([d / "run" / "reports.jsonl", d / "run" / "m.ckpt"])))
    datasets_same = runs[0][0] == runs[1][0]
    runs_same = runs[0][1] == runs[1][1]

    params, cfg = m.load_checkpoint(tmp_path / "first" / "run" / "m.ckpt")
    ds = sv.load_dataset(tmp_path / "first" / "data")
    data = pl.prepare(ds.split("val"), ds, kg.build_index(ds.kg_triples), ds.tables)
    before = m.forward_batch(params, cfg, *data.batch(np.arange(len(data)))).logits.data
    m.save_checkpoint(params, cfg, tmp_path / "again.ckpt")
    loaded, _ = m.load_checkpoint(tmp_path / "again.ckpt")
    after = m.forward_batch(loaded, cfg, *data.batch(np.arange(len(data)))).logits.data
    logits_same = before.tobytes() == after.tobytes()
    ckpt_same = (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "first" / "run" / "m.ckpt").read_bytes()

    ok = datasets_same and runs_same and logits_same and ckpt_same
    record(8, "determinism and persistence", ok,
           f"datasets identical={datasets_same}, reports+checkpoints identical={runs_same}, "
           f"round-trip logits bit-exact={logits_same}, re-save identical={ckpt_same}")
    assert ok
