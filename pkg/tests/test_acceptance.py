"""Acceptance suite: one test and one printed pass/fail line per criterion.

Run with `pytest tests/test_acceptance.py -v -s`. The directional
pretraining-effect criterion trains a real (small) model and dominates the
runtime; everything else finishes in seconds.
"""

import hashlib
import statistics
import time

import numpy as np
import pytest

from tspmn.corpus import SynthSpec, generate_synthetic_world, sample_few_shot
from tspmn.encoder import ModelConfig, grad_check
from tspmn.evalkit import compute_metrics
from tspmn.packing import (
    assemble_msf_example,
    assemble_pretrain_example,
    collate,
    pack_term_sequences,
)
from tspmn.terminology import build_dictionary, make_dialogue_terms_pairs, retrieve_terms
from tspmn.textcodec import MASK_ID, build_vocab, encode_text
from tspmn.training import (
    TrainConfig,
    evaluate_queries,
    init_model_params,
    make_loss_fn,
    run_finetuning,
    run_pretraining,
)
from tspmn.util import subseed

from .oracles import brute_force_metrics, naive_retrieve


def _report(number: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"{status} criterion {number}: {label}{suffix}")
    assert ok, f"criterion {number}: {label}{suffix}"


# ---------------------------------------------------------------------------
# 1. Gradient correctness


def test_criterion_1_gradient_correctness():
    started = time.time()
    spec = SynthSpec(
        term_count=6, paraphrases_per_term=(1, 2), dialogue_count=4,
        query_count=6, terms_per_query=(1, 3), seed=9,
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    model = ModelConfig(
        vocab_size=len(vocab), layers=2, heads=2, hidden=64, ffn=128,
        max_len=128, dropout=0.0, dtype="float64",
    )
    params = init_model_params(model, 9)
    sequences = pack_term_sequences(range(len(world.dictionary)), 3)
    msf_batch = collate(
        [
            assemble_msf_example(
                vocab, world.dictionary, sequences[0], q.query, q.gold_term_ids, 128
            )
            for q in world.train[:2]
        ]
    )
    pretrain_batch = collate(
        [
            assemble_pretrain_example(
                vocab, world.dictionary, p, 4, 0.5, subseed(9, "acc1", p.dialogue_id), 128
            )
            for p in pairs[:2]
        ]
    )
    worst = 0.0
    for name, batch, objective in (
        ("msf", msf_batch, "match"),
        ("ctd", pretrain_batch, "match"),
        ("mmtm", pretrain_batch, "mlm"),
        ("combined", pretrain_batch, "pretrain"),
    ):
        err = grad_check(
            params,
            make_loss_fn(model, batch, objective, lam=0.9),
            step=1e-5,
            sample_count=200,
            seed=subseed(9, "acc1-check", name),
        )
        worst = max(worst, err)
    elapsed = time.time() - started
    _report(
        1,
        "gradient correctness (MSF/CTD/MMTM/combined)",
        worst < 1e-5 and elapsed < 60.0,
        f"max rel err {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Retrieval oracle


def test_criterion_2_retrieval_oracle():
    started = time.time()
    rng = np.random.default_rng(20240602)
    alphabet = list("abcd")
    mismatches = 0
    for _ in range(1000):
        surfaces = set()
        target = int(rng.integers(1, 12))
        while len(surfaces) < target:
            surfaces.add(
                "".join(rng.choice(alphabet, int(rng.integers(1, 5))))
            )
        text = "".join(rng.choice(list("abcdef "), int(rng.integers(0, 150))))
        dictionary = build_dictionary([(s, "S") for s in sorted(surfaces)])
        got = {m.term_id: list(m.spans) for m in retrieve_terms(dictionary, text)}
        want = naive_retrieve({e.term_id: e.surface for e in dictionary}, text)
        if got != want:
            mismatches += 1
    elapsed = time.time() - started
    _report(
        2,
        "automaton identical to naive substring oracle on 1000 cases",
        mismatches == 0 and elapsed < 30.0,
        f"{mismatches} mismatches, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. Metrics oracle


def test_criterion_3_metrics_oracle():
    rng = np.random.default_rng(20240603)
    universe = range(14)
    mismatches = 0
    for _ in range(1000):
        preds, golds = {}, {}
        for i in range(int(rng.integers(1, 12))):
            qid = f"q{i}"
            preds[qid] = {t for t in universe if rng.random() < 0.35}
            golds[qid] = {t for t in universe if rng.random() < 0.35}
        m = compute_metrics(preds, golds, universe)
        want = brute_force_metrics(preds, golds, universe)
        if not (
            m.precision == want["precision"]
            and m.recall == want["recall"]
            and m.micro_f1 == want["micro_f1"]
            and m.macro_f1 == want["macro_f1"]
            and m.accuracy == want["accuracy"]
        ):
            mismatches += 1
    hand = compute_metrics(
        {"q1": {0}, "q2": {1, 2}}, {"q1": {0, 1}, "q2": {2}}, range(3)
    )
    hand_ok = (
        abs(hand.micro_f1 - 2 / 3) < 1e-12
        and abs(hand.macro_f1 - 2 / 3) < 1e-12
        and hand.accuracy == 0.0
    )
    _report(
        3,
        "compute_metrics equals brute-force counts on 1000 cases + hand case",
        mismatches == 0 and hand_ok,
        f"{mismatches} mismatches",
    )


# ---------------------------------------------------------------------------
# 4. Masking invariant suite


def test_criterion_4_masking_invariants():
    spec = SynthSpec(
        term_count=20, paraphrases_per_term=(1, 2), dialogue_count=250,
        query_count=10, terms_per_query=(1, 3), seed=44,
    )
    world = generate_synthetic_world(spec)
    dictionary = world.dictionary
    pairs = [
        p for p in make_dialogue_terms_pairs(dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(dictionary, (t for p in pairs for _, t in p.turns))
    surface_ids = {tuple(encode_text(vocab, e.surface)) for e in dictionary}
    violations = 0
    checked = 0
    for i in range(500):
        pair = pairs[i % len(pairs)]
        ex = assemble_pretrain_example(
            vocab, dictionary, pair, 8, 0.5, subseed(44, "acc4", i), 224
        )
        checked += 1
        sampled = {t for t, flag in zip(ex.term_ids, ex.labels) if flag}
        # expected masked positions: union of sampled positives' spans
        head_len = ex.eot_positions[-1] + 2
        offsets = []
        cursor = head_len
        for _, text in pair.turns:
            cursor += 1
            offsets.append(cursor)
            cursor += len(text)
        expected = set()
        for match in pair.matches:
            if match.term_id not in sampled:
                continue
            for turn, start, end in match.spans:
                for pos in range(offsets[turn] + start, offsets[turn] + end):
                    if pos < len(ex.token_ids) - 1:
                        expected.add(pos)
        if set(ex.mask_positions) != expected:
            violations += 1
            continue
        if any(ex.token_ids[pos] != MASK_ID for pos in ex.mask_positions):
            violations += 1
            continue
        # every masked run reconstructs a dictionary surface (possibly cut
        # by the length budget, so check prefix membership via full runs)
        runs: list[tuple[int, list[int]]] = []
        for pos, tgt in zip(ex.mask_positions, ex.mlm_targets):
            if runs and pos == runs[-1][0] + len(runs[-1][1]):
                runs[-1][1].append(tgt)
            else:
                runs.append((pos, [tgt]))
        truncated_tail = len(ex.token_ids) - 1
        for start, ids in runs:
            if start + len(ids) == truncated_tail:
                if not any(
                    tuple(ids) == s[: len(ids)] for s in surface_ids
                ):
                    violations += 1
                    break
            elif tuple(ids) not in surface_ids:
                violations += 1
                break
    _report(
        4,
        "masked positions are exactly sampled positive spans, targets in dictionary",
        violations == 0 and checked == 500,
        f"{violations} violations over {checked} examples",
    )


# ---------------------------------------------------------------------------
# 5. Combination bookkeeping exactness


def test_criterion_5_combination_exactness():
    spec = SynthSpec(
        term_count=8, paraphrases_per_term=(1, 1), dialogue_count=24,
        query_count=10, terms_per_query=(1, 3), seed=55, surface_len=(3, 3),
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    lam = 0.9
    config = TrainConfig.pretrain(
        lr=1e-3, epochs=2, n=6, batch_size=8, lam=lam, seed=5, max_len=160,
        model=ModelConfig(vocab_size=0, layers=1, heads=2, hidden=32, ffn=64),
    )
    _, log = run_pretraining(world.dictionary, pairs, config, vocab=vocab)
    bad = sum(
        1
        for r in log.steps
        if r["loss_pretrain"] != lam * r["loss_ctd"] + (1.0 - lam) * r["loss_mmtm"]
    )
    _report(
        5,
        "logged combined loss is bit-exactly the weighted sum at every step",
        bad == 0 and len(log.steps) > 0,
        f"{bad} of {len(log.steps)} steps off",
    )


# ---------------------------------------------------------------------------
# 6. Overfit sanity


def test_criterion_6_overfit_sanity():
    started = time.time()
    spec = SynthSpec(
        term_count=16, paraphrases_per_term=(1, 2), dialogue_count=4,
        query_count=80, terms_per_query=(1, 3), seed=606, surface_len=(3, 4),
    )
    world = generate_synthetic_world(spec)
    train = (world.train + world.dev + world.test)[:64]
    vocab = build_vocab(world.dictionary, [q.query for q in train])
    config = TrainConfig.finetune(
        lr=1e-3, epochs=300, n=16, batch_size=16, seed=0, max_len=192,
        model=ModelConfig(vocab_size=0, dropout=0.0, init_std=0.125),
        early_stop_train_f1=0.99,
    )
    ckpt, log = run_finetuning(world.dictionary, train, [], config, vocab=vocab)
    metrics = evaluate_queries(
        ckpt.params, ckpt.model, vocab, world.dictionary, train, 16, 192
    )
    epochs_used = len([r for r in log.epochs if "epoch" in r])
    elapsed = time.time() - started
    _report(
        6,
        "fresh model reaches train micro-F1 >= 0.99 on 64 queries",
        metrics.micro_f1 >= 0.99 and epochs_used <= 300 and elapsed < 300.0,
        f"micro-F1 {metrics.micro_f1:.4f} after {epochs_used} epochs, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. Directional pretraining effect


def test_criterion_7_pretraining_effect():
    started = time.time()
    spec = SynthSpec(
        term_count=30, paraphrases_per_term=(2, 2), dialogue_count=2000,
        query_count=300, terms_per_query=(2, 4), seed=20240601,
        surface_len=(3, 3), colloquial_rate=0.5,
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    few = sample_few_shot(world.train, 2)
    model = ModelConfig(vocab_size=0, dropout=0.1, init_std=0.125)

    pretrain_config = TrainConfig.pretrain(
        lr=1e-3, epochs=16, n=30, batch_size=16, seed=101, max_len=256, model=model
    )
    pretrained, _ = run_pretraining(
        world.dictionary, pairs, pretrain_config, vocab=vocab
    )

    gaps_k2: list[float] = []
    gaps_full: list[float] = []
    for seed in range(5):
        scores = {}
        for shots, train_set in (("k2", few), ("full", world.train)):
            for label, init in (("pre", pretrained), ("raw", None)):
                config = TrainConfig.finetune(
                    lr=1e-3, epochs=100, n=30, batch_size=16, seed=seed,
                    max_len=256, model=model,
                )
                ckpt, _ = run_finetuning(
                    world.dictionary, train_set, world.dev, config,
                    init=init, vocab=vocab,
                )
                metrics = evaluate_queries(
                    ckpt.params, ckpt.model, vocab, world.dictionary,
                    world.test, 30, 256,
                )
                scores[(shots, label)] = metrics.micro_f1
        gaps_k2.append(scores[("k2", "pre")] - scores[("k2", "raw")])
        gaps_full.append(scores[("full", "pre")] - scores[("full", "raw")])
        print(
            f"  seed {seed}: k2 {scores[('k2', 'pre')]:.3f}/{scores[('k2', 'raw')]:.3f}"
            f" full {scores[('full', 'pre')]:.3f}/{scores[('full', 'raw')]:.3f}"
        )

    median_k2 = statistics.median(gaps_k2)
    median_full = statistics.median(gaps_full)
    elapsed = time.time() - started
    _report(
        7,
        "pretraining lifts k=2 micro-F1 by >= 5 points and the few-shot gap dominates",
        median_k2 >= 0.05 and median_k2 >= median_full and elapsed < 1800.0,
        f"median gap k2 {median_k2:.3f}, full {median_full:.3f}, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8. Determinism


def test_criterion_8_determinism(tmp_path):
    spec = SynthSpec(
        term_count=10, paraphrases_per_term=(1, 2), dialogue_count=48,
        query_count=40, terms_per_query=(1, 3), seed=88, surface_len=(3, 3),
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    model = ModelConfig(vocab_size=0, layers=1, heads=2, hidden=32, ffn=64)
    pre_config = TrainConfig.pretrain(
        lr=1e-3, epochs=2, n=8, batch_size=8, seed=12, max_len=160, model=model
    )
    ft_config = TrainConfig.finetune(
        lr=1e-3, epochs=3, n=8, batch_size=8, seed=13, max_len=160, model=model
    )

    digests = []
    logs = []
    for run, workers in enumerate((1, 4, 1, 4)):
        out = tmp_path / f"run{run}"
        pre_ckpt, pre_log = run_pretraining(
            world.dictionary, pairs, pre_config, vocab=vocab,
            out_dir=str(out / "pre"), workers=workers,
        )
        ft_ckpt, ft_log = run_finetuning(
            world.dictionary, world.train, world.dev, ft_config,
            init=pre_ckpt, vocab=vocab, out_dir=str(out / "ft"), workers=workers,
        )
        pre_bytes = (out / "pre" / "pretrained.ckpt").read_bytes()
        ft_bytes = (out / "ft" / "finetuned.ckpt").read_bytes()
        digests.append(
            (
                hashlib.sha256(pre_bytes).hexdigest(),
                hashlib.sha256(ft_bytes).hexdigest(),
            )
        )
        logs.append((pre_log.steps, pre_log.epochs, ft_log.epochs))
    identical = len(set(digests)) == 1 and all(l == logs[0] for l in logs[1:])
    _report(
        8,
        "pretrain+finetune byte-identical across reruns and worker counts 1/4",
        identical,
        f"digests {' '.join(sorted({d[0][:8] for d in digests}))}",
    )
