"""Command line entry point.

Every subcommand is a thin composition of library calls. Options resolve in
three layers: command-line flags win over keys in an optional `--config`
JSON file, which win over built-in defaults; unknown config keys are
rejected. All randomness derives from the single `--seed` flag.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from types import SimpleNamespace

from .corpus import (
    SynthSpec,
    generate_synthetic_world,
    load_dialogues_jsonl,
    load_queries_jsonl,
    sample_few_shot,
    write_dialogues_jsonl,
    write_paraphrases_tsv,
    write_queries_jsonl,
)
from .encoder import ModelConfig, grad_check
from .evalkit import write_metrics_json, write_metrics_tsv
from .packing import (
    assemble_msf_example,
    assemble_pretrain_example,
    collate,
    dump_examples_jsonl,
    pack_term_sequences,
    pretrain_example_seed,
)
from .terminology import (
    load_dictionary_tsv,
    make_dialogue_terms_pairs,
    save_dictionary_tsv,
)
from .textcodec import build_vocab, load_vocab, save_vocab
from .training import (
    TrainConfig,
    evaluate_queries,
    init_model_params,
    load_checkpoint,
    make_loss_fn,
    run_finetuning,
    run_pretraining,
)
from .util import DataError, NumericalError, atomic_write_text, subseed

_MODEL_DEFAULTS = {
    "layers": 2,
    "heads": 2,
    "hidden": 64,
    "ffn": 128,
    "dropout": 0.1,
}

_TRAIN_DEFAULTS = {
    "batch_size": 16,
    "lam": 0.9,
    "pos_ratio": 0.5,
    "weight_decay": 0.01,
    "max_len": 256,
    "clip_norm": 1.0,
    "workers": 1,
    **_MODEL_DEFAULTS,
}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lam", type=float, help="discrimination loss weight")
    parser.add_argument("--n", type=int, help="terms per packed sequence")
    parser.add_argument("--pos-ratio", type=float, dest="pos_ratio")
    parser.add_argument("--weight-decay", type=float, dest="weight_decay")
    parser.add_argument("--max-len", type=int, dest="max_len")
    parser.add_argument("--clip-norm", type=float, dest="clip_norm")
    parser.add_argument("--workers", type=int, help="batch assembly processes")
    for name in _MODEL_DEFAULTS:
        parser.add_argument(f"--{name}", type=float if name == "dropout" else int)


def _merge(args: argparse.Namespace, defaults: dict) -> SimpleNamespace:
    """flags > config file > defaults; unknown config keys are an error."""
    config = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as handle:
                config = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(config) - set(defaults)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key, default)
        merged[key] = value
    return SimpleNamespace(**merged)


def _model_config(opts: SimpleNamespace) -> ModelConfig:
    return ModelConfig(
        vocab_size=0,
        layers=opts.layers,
        heads=opts.heads,
        hidden=opts.hidden,
        ffn=opts.ffn,
        dropout=opts.dropout,
    )


def _train_config(opts: SimpleNamespace, phase: str, seed: int) -> TrainConfig:
    return TrainConfig(
        phase=phase,
        lr=opts.lr,
        batch_size=opts.batch_size,
        epochs=opts.epochs,
        lam=opts.lam,
        n=opts.n,
        pos_ratio=opts.pos_ratio,
        weight_decay=opts.weight_decay,
        seed=seed,
        max_len=opts.max_len,
        clip_norm=opts.clip_norm,
        model=_model_config(opts),
    )


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_world(args) -> int:
    opts = _merge(
        args,
        {
            "terms": 30,
            "paraphrases": [2, 2],
            "dialogues": 2000,
            "queries": 400,
            "terms_per_query": [2, 4],
            "slots": 2,
            "colloquial_rate": 0.75,
        },
    )
    spec = SynthSpec(
        term_count=opts.terms,
        paraphrases_per_term=tuple(opts.paraphrases),
        dialogue_count=opts.dialogues,
        query_count=opts.queries,
        terms_per_query=tuple(opts.terms_per_query),
        seed=args.seed,
        slot_count=opts.slots,
        colloquial_rate=opts.colloquial_rate,
    )
    world = generate_synthetic_world(spec)
    out = args.out
    os.makedirs(out, exist_ok=True)
    save_dictionary_tsv(world.dictionary, os.path.join(out, "dictionary.tsv"))
    write_dialogues_jsonl(os.path.join(out, "dialogues.jsonl"), world.dialogues)
    for name, split in (("train", world.train), ("dev", world.dev), ("test", world.test)):
        write_queries_jsonl(
            os.path.join(out, f"{name}.jsonl"), split, world.dictionary
        )
    write_paraphrases_tsv(os.path.join(out, "paraphrases.tsv"), world.paraphrases)
    print(
        f"world: {len(world.dictionary)} terms, {len(world.dialogues)} dialogues, "
        f"{len(world.train)}/{len(world.dev)}/{len(world.test)} train/dev/test -> {out}"
    )
    return 0


def _cmd_build_dict(args) -> int:
    dictionary = load_dictionary_tsv(args.input)
    save_dictionary_tsv(dictionary, args.out)
    print(f"dictionary: {len(dictionary)} terms, {len(dictionary.slots)} slots -> {args.out}")
    return 0


def _cmd_retrieve(args) -> int:
    dictionary = load_dictionary_tsv(args.dict)
    dialogues = load_dialogues_jsonl(args.dialogues)
    lines = []
    matched = 0
    for pair in make_dialogue_terms_pairs(dictionary, dialogues):
        matched += bool(pair.matches)
        lines.append(
            json.dumps(
                {
                    "dialogue_id": pair.dialogue_id,
                    "turns": [{"speaker": s, "text": t} for s, t in pair.turns],
                    "matches": [
                        {"term_id": m.term_id, "spans": [list(s) for s in m.spans]}
                        for m in pair.matches
                    ],
                }
            )
        )
    atomic_write_text(args.out, "\n".join(lines) + "\n" if lines else "")
    print(f"retrieved terms in {matched}/{len(dialogues)} dialogues -> {args.out}")
    return 0


def _cmd_pack(args) -> int:
    opts = _merge(
        args, {"n": 20, "max_len": 256, "pos_ratio": 0.5, "limit": None}
    )
    dictionary = load_dictionary_tsv(args.dict)
    examples = []
    if args.mode == "msf":
        if not args.data:
            raise DataError("--data is required for --mode msf")
        queries = load_queries_jsonl(args.data, dictionary)
        vocab = (
            load_vocab(args.vocab)
            if args.vocab
            else build_vocab(dictionary, [q.query for q in queries])
        )
        sequences = pack_term_sequences(range(len(dictionary)), opts.n)
        for q in queries[: opts.limit]:
            for seq in sequences:
                examples.append(
                    assemble_msf_example(
                        vocab, dictionary, seq, q.query, q.gold_term_ids, opts.max_len
                    )
                )
    else:
        if not args.dialogues:
            raise DataError("--dialogues is required for --mode pretrain")
        dialogues = load_dialogues_jsonl(args.dialogues)
        pairs = [
            p for p in make_dialogue_terms_pairs(dictionary, dialogues) if p.matches
        ]
        vocab = (
            load_vocab(args.vocab)
            if args.vocab
            else build_vocab(dictionary, (t for p in pairs for _, t in p.turns))
        )
        for pair in pairs[: opts.limit]:
            examples.append(
                assemble_pretrain_example(
                    vocab, dictionary, pair, opts.n, opts.pos_ratio,
                    pretrain_example_seed(args.seed, 0, pair.dialogue_id),
                    opts.max_len,
                )
            )
    dump_examples_jsonl(args.out, examples)
    if not args.vocab:
        save_vocab(vocab, args.out + ".vocab")
    print(f"packed {len(examples)} examples -> {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    opts = _merge(args, {**_TRAIN_DEFAULTS, "lr": 3e-5, "epochs": 5, "n": 20})
    dictionary = load_dictionary_tsv(args.dict)
    dialogues = load_dialogues_jsonl(args.dialogues)
    pairs = list(make_dialogue_terms_pairs(dictionary, dialogues))
    vocab = build_vocab(dictionary, (t for p in pairs for _, t in p.turns))
    config = _train_config(opts, "pretrain", args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_vocab(vocab, os.path.join(args.out, "vocab.txt"))
    ckpt, log = run_pretraining(
        dictionary, pairs, config, vocab=vocab, out_dir=args.out,
        workers=opts.workers,
    )
    last = log.epochs[-1]
    print(
        f"pretrained {config.epochs} epochs ({ckpt.step} steps), "
        f"final loss {last['loss_pretrain']:.4f} -> {args.out}"
    )
    return 0


def _cmd_finetune(args) -> int:
    opts = _merge(args, {**_TRAIN_DEFAULTS, "lr": 1e-5, "epochs": 30, "n": 20})
    dictionary = load_dictionary_tsv(args.dict)
    train = load_queries_jsonl(args.train, dictionary)
    dev = load_queries_jsonl(args.dev, dictionary) if args.dev else []
    if args.k is not None:
        train = sample_few_shot(train, args.k, seed=args.seed)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
        if not args.vocab:
            raise DataError("--vocab is required together with --init")
        vocab = load_vocab(args.vocab)
    elif args.vocab:
        vocab = load_vocab(args.vocab)
    else:
        vocab = build_vocab(
            dictionary, [q.query for q in train] + [q.query for q in dev]
        )
    config = _train_config(opts, "finetune", args.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt, log = run_finetuning(
        dictionary, train, dev, config, init=init, vocab=vocab,
        out_dir=args.out, workers=opts.workers,
    )
    save_vocab(vocab, os.path.join(args.out, "vocab.txt"))
    summary = log.epochs[-1]
    print(
        f"finetuned on {len(train)} queries; best dev micro-F1 "
        f"{summary.get('best_dev_micro_f1')} -> {args.out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    opts = _merge(args, {"n": 20, "max_len": 256, "batch_size": 32})
    dictionary = load_dictionary_tsv(args.dict)
    ckpt = load_checkpoint(args.ckpt)
    vocab = load_vocab(args.vocab)
    if vocab.digest() != ckpt.vocab_digest:
        raise DataError("vocabulary digest does not match the checkpoint")
    if dictionary.digest() != ckpt.dict_digest:
        raise DataError("dictionary digest does not match the checkpoint")
    queries = load_queries_jsonl(args.data, dictionary)
    metrics = evaluate_queries(
        ckpt.params, ckpt.model, vocab, dictionary, queries,
        opts.n, opts.max_len, batch_size=opts.batch_size,
    )
    if args.out:
        write_metrics_json(metrics, args.out)
    if args.tsv:
        write_metrics_tsv(metrics, args.tsv)
    for key, value in metrics.headline().items():
        print(f"{key}: {value:.4f}")
    return 0


def _cmd_fewshot(args) -> int:
    dictionary = load_dictionary_tsv(args.dict)
    train = load_queries_jsonl(args.train, dictionary)
    subset = sample_few_shot(train, args.k, seed=args.seed)
    write_queries_jsonl(args.out, subset, dictionary)
    print(f"{args.k}-shot subset: {len(subset)} of {len(train)} queries -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    opts = _merge(args, {"samples": 200, "step": 1e-5, "tolerance": 1e-5, "lam": 0.9})
    spec = SynthSpec(
        term_count=6,
        paraphrases_per_term=(1, 2),
        dialogue_count=4,
        query_count=6,
        terms_per_query=(1, 3),
        seed=args.seed,
    )
    world = generate_synthetic_world(spec)
    pairs = [
        p
        for p in make_dialogue_terms_pairs(world.dictionary, world.dialogues)
        if p.matches
    ]
    vocab = build_vocab(world.dictionary, (t for p in pairs for _, t in p.turns))
    model = ModelConfig(
        vocab_size=len(vocab), layers=2, heads=2, hidden=64, ffn=128,
        max_len=128, dropout=0.0, dtype="float64",
    )
    params = init_model_params(model, args.seed)

    sequences = pack_term_sequences(range(len(world.dictionary)), 3)
    msf_batch = collate(
        [
            assemble_msf_example(
                vocab, world.dictionary, seq, q.query, q.gold_term_ids, model.max_len
            )
            for q in world.train[:2]
            for seq in sequences[:1]
        ]
    )
    pretrain_batch = collate(
        [
            assemble_pretrain_example(
                vocab, world.dictionary, pair, 4, 0.5,
                subseed(args.seed, "gradcheck", pair.dialogue_id), model.max_len,
            )
            for pair in pairs[:2]
        ]
    )
    checks = [
        ("msf", make_loss_fn(model, msf_batch, "match")),
        ("ctd", make_loss_fn(model, pretrain_batch, "match")),
        ("mmtm", make_loss_fn(model, pretrain_batch, "mlm")),
        ("combined", make_loss_fn(model, pretrain_batch, "pretrain", lam=opts.lam)),
    ]
    worst = 0.0
    for name, loss_fn in checks:
        err = grad_check(
            params, loss_fn, step=opts.step,
            sample_count=opts.samples, seed=subseed(args.seed, "gradcheck", name),
        )
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e}")
    print(f"overall: max relative error {worst:.3e} (tolerance {opts.tolerance:.1e})")
    if worst >= opts.tolerance:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {opts.tolerance}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tspmn",
        description="dictionary-driven term/query matching pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0, help="root random seed")
        p.add_argument("--config", help="JSON file of option defaults")

    p = sub.add_parser("gen-world", help="generate a synthetic desk-scale corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--terms", type=int)
    p.add_argument("--paraphrases", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--dialogues", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--terms-per-query", type=int, nargs=2, dest="terms_per_query",
                   metavar=("LO", "HI"))
    p.add_argument("--slots", type=int)
    p.add_argument("--colloquial-rate", type=float, dest="colloquial_rate")
    p.set_defaults(func=_cmd_gen_world)

    p = sub.add_parser("build-dict", help="normalize and validate a dictionary TSV")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_dict)

    p = sub.add_parser("retrieve", help="retrieve dictionary terms in dialogues")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--dialogues", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("pack", help="dump packed model inputs for inspection")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--mode", choices=("msf", "pretrain"), default="msf")
    p.add_argument("--data", help="labeled queries JSONL (msf mode)")
    p.add_argument("--dialogues", help="dialogues JSONL (pretrain mode)")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--pos-ratio", type=float, dest="pos_ratio")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_pack)

    p = sub.add_parser("pretrain", help="run the self-supervised pretraining loop")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--dialogues", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the matching objective")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.add_argument("--vocab", help="vocabulary file (required with --init)")
    p.add_argument("--k", type=int, help="few-shot k; subsample train per term")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint on labeled queries")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--tsv", help="per-term TSV path")
    p.add_argument("--n", type=int)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("fewshot", help="write a k-shot training subset")
    common(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fewshot)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--lam", type=float)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
