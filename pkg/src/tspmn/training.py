"""Optimization, the two training loops, and checkpoint serialization.

Both loops are bit-reproducible: every random draw (initialization, batch
order, per-dialogue term sampling and masking, dropout) comes from a named
sub-seed of the config seed, and batch assembly is a pure function of those
sub-seeds, so the logged losses and the final checkpoint bytes depend only
on (seed, config, data) — in particular not on the worker count used for
data-parallel batch assembly.

Checkpoint file layout (little-endian):

    magic b"TSPM" | u32 version | u32 header_len | UTF-8 JSON header
    | one raw float32 C-order array per parameter, in header param_order
    | optionally the optimizer's first-moment arrays then second-moment
      arrays, in the same order

The header records the model configuration, vocabulary and dictionary
digests, the training step, and the RNG state (root seed + step).
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import LabeledQuery
from .encoder import (
    ModelConfig,
    backward_batch,
    forward_batch,
    init_params,
    param_shapes,
)
from .evalkit import Metrics, aggregate_predictions, compute_metrics
from .heads import (
    decide,
    head_param_shapes,
    init_head_params,
    match_probabilities,
    matching_loss_batch,
    mlm_loss_batch,
    pretrain_loss,
)
from .packing import (
    Batch,
    PackedExample,
    assemble_msf_example,
    assemble_pretrain_example,
    collate,
    pack_term_sequences,
    pretrain_example_seed,
)
from .terminology import DialogueTermsPair, TermDictionary
from .textcodec import Vocab, build_vocab
from .util import (
    DataError,
    NumericalError,
    atomic_write_bytes,
    atomic_write_text,
    canonical_json,
    single_thread_blas,
    subseed,
    tune_allocator,
)

CHECKPOINT_MAGIC = b"TSPM"
CHECKPOINT_VERSION = 1

PRETRAIN_LR = 3e-5
FINETUNE_LR = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    phase: str  # "pretrain" | "finetune"
    lr: float
    batch_size: int = 16
    epochs: int = 5
    lam: float = 0.9
    n: int = 20
    pos_ratio: float = 0.5
    weight_decay: float = 0.01
    seed: int = 0
    max_len: int = 256
    clip_norm: float = 1.0
    model: ModelConfig = ModelConfig(vocab_size=0)
    early_stop_train_f1: float | None = None

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", PRETRAIN_LR)
        kw.setdefault("epochs", 5)
        kw.setdefault("n", 20)
        return cls(phase="pretrain", **kw)

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", FINETUNE_LR)
        kw.setdefault("epochs", 30)
        kw.setdefault("n", 20)
        return cls(phase="finetune", **kw)

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise DataError(f"unknown phase {self.phase!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise DataError("lr, batch_size, and epochs must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise DataError(f"loss weight must be in [0, 1], got {self.lam}")
        if self.n < 1 or self.max_len < 4:
            raise DataError("n must be >= 1 and max_len >= 4")


def resolve_model(config: TrainConfig, vocab: Vocab) -> ModelConfig:
    """Bind the model to the vocabulary size and the packing length."""
    model = replace(config.model, vocab_size=len(vocab), max_len=config.max_len)
    model.validate()
    return model


def model_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = param_shapes(config)
    shapes.update(head_param_shapes(config))
    return shapes


def init_model_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    params = init_params(config, seed)
    params.update(init_head_params(config, seed))
    return params


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_opt_state(params: dict[str, np.ndarray]) -> OptState:
    return OptState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    The decay multiplies each parameter by (1 - lr * weight_decay)
    independently of the adaptive term. Non-finite gradients abort.
    """
    opt.step += 1
    t = opt.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r} at step {t}")
        m = opt.m[name]
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# Batch objectives


@dataclass
class StepLosses:
    match: float
    mlm: float
    combined: float
    grads: dict[str, np.ndarray] | None


def _gather_eots(batch: Batch):
    rows, cols, labels, weights = [], [], [], []
    b = batch.size
    for i, ex in enumerate(batch.examples):
        count = len(ex.eot_positions)
        w = 1.0 / (count * b)
        for pos, flag in zip(ex.eot_positions, ex.labels):
            rows.append(i)
            cols.append(pos)
            labels.append(flag)
            weights.append(w)
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(labels, dtype=bool),
        np.asarray(weights),
    )


def _gather_masks(batch: Batch):
    rows, cols, targets, counts = [], [], [], []
    for i, ex in enumerate(batch.examples):
        if not ex.mask_positions:
            continue
        counts.append((i, len(ex.mask_positions)))
        for pos, tgt in zip(ex.mask_positions, ex.mlm_targets):
            rows.append(i)
            cols.append(pos)
            targets.append(tgt)
    masked_examples = len(counts)
    weights = []
    for _, m in counts:
        weights.extend([1.0 / (m * masked_examples)] * m)
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(targets, dtype=np.int64),
        np.asarray(weights),
    )


def batch_losses(
    params: dict[str, np.ndarray],
    model: ModelConfig,
    batch: Batch,
    objective: str,
    lam: float = 0.9,
    train: bool = False,
    dropout_seed: int = 0,
    want_grads: bool = True,
) -> StepLosses:
    """Forward (and optionally backward) pass for one batch.

    objective is "match" (fine-tuning / discrimination alone), "mlm"
    (mask prediction alone), or "pretrain" (lam-weighted combination).
    The returned combined value for "pretrain" is exactly
    lam * match + (1 - lam) * mlm evaluated in float64.
    """
    dtype = model.np_dtype
    states, tape = forward_batch(
        params, model, batch.token_ids, batch.segment_ids, batch.lengths,
        train=train, dropout_seed=dropout_seed,
    )
    zero_heads = {
        name: np.zeros(shape, dtype=dtype)
        for name, shape in head_param_shapes(model).items()
    }

    l_match = 0.0
    l_mlm = 0.0
    dstates = np.zeros_like(states)
    head_grads = dict(zero_heads)

    if objective in ("match", "pretrain"):
        rows, cols, labels, weights = _gather_eots(batch)
        l_match, d_match, hg = matching_loss_batch(
            params, states, rows, cols, labels, weights.astype(dtype)
        )
        scale = lam if objective == "pretrain" else 1.0
        dstates += dtype(scale) * d_match
        head_grads["match_w"] = dtype(scale) * hg["match_w"]
        head_grads["match_b"] = dtype(scale) * hg["match_b"]

    if objective in ("mlm", "pretrain"):
        rows, cols, targets, weights = _gather_masks(batch)
        if rows.size:
            l_mlm, d_mlm, hg = mlm_loss_batch(
                params, states, rows, cols, targets, weights.astype(dtype)
            )
            scale = (1.0 - lam) if objective == "pretrain" else 1.0
            dstates += dtype(scale) * d_mlm
            head_grads["mlm_w"] = dtype(scale) * hg["mlm_w"]
            head_grads["mlm_b"] = dtype(scale) * hg["mlm_b"]

    if objective == "match":
        combined = l_match
    elif objective == "mlm":
        combined = l_mlm
    else:
        combined = pretrain_loss(l_match, l_mlm, lam)

    grads = None
    if want_grads:
        grads = backward_batch(params, model, tape, dstates)
        grads.update(head_grads)
    return StepLosses(match=l_match, mlm=l_mlm, combined=combined, grads=grads)


def make_loss_fn(model: ModelConfig, batch: Batch, objective: str, lam: float = 0.9):
    """Deterministic (params -> loss, grads) closure for gradient checking."""

    def loss_fn(params, want_grads: bool):
        result = batch_losses(
            params, model, batch, objective, lam=lam,
            train=False, want_grads=want_grads,
        )
        return result.combined, result.grads

    return loss_fn


# ---------------------------------------------------------------------------
# Parallel example assembly

_WORKER_STATE: dict = {}


def _worker_init(payload: dict) -> None:
    _WORKER_STATE.update(payload)


def _worker_run(job: tuple) -> PackedExample:
    kind = job[0]
    s = _WORKER_STATE
    if kind == "pretrain":
        _, pair_index, seed = job
        return assemble_pretrain_example(
            s["vocab"], s["dictionary"], s["pairs"][pair_index],
            s["n"], s["pos_ratio"], seed, s["max_len"],
        )
    _, query_index, seq_index = job
    query = s["queries"][query_index]
    return assemble_msf_example(
        s["vocab"], s["dictionary"], s["sequences"][seq_index],
        query.query, query.gold_term_ids, s["max_len"],
    )


class ExampleAssembler:
    """Assembles packed examples, optionally fanning out to worker processes.

    Output is a pure function of the job list, so results are identical for
    any worker count; jobs are returned in submission order.
    """

    def __init__(self, payload: dict, workers: int = 1):
        self._payload = payload
        self._pool = None
        self._workers = max(1, workers)
        if self._workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=self._workers,
                initializer=_worker_init,
                initargs=(payload,),
            )
        else:
            _worker_init(payload)

    def run(self, jobs: Sequence[tuple]) -> list[PackedExample]:
        if self._pool is None:
            _WORKER_STATE.clear()
            _WORKER_STATE.update(self._payload)
            return [_worker_run(job) for job in jobs]
        chunk = max(1, len(jobs) // self._workers)
        return list(self._pool.map(_worker_run, jobs, chunksize=chunk))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    vocab_digest: str
    dict_digest: str
    step: int
    seed: int
    phase: str
    opt: OptState | None = None


def save_checkpoint(ckpt: Checkpoint, path: str, include_optimizer: bool = False) -> None:
    order = list(model_param_shapes(ckpt.model))
    header = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(replace(ckpt.model, dtype="float32")),
        "vocab_digest": ckpt.vocab_digest,
        "dict_digest": ckpt.dict_digest,
        "step": ckpt.step,
        "rng": {"seed": ckpt.seed, "step": ckpt.step},
        "phase": ckpt.phase,
        "param_order": order,
        "has_optimizer": bool(include_optimizer and ckpt.opt is not None),
        "opt_step": ckpt.opt.step if include_optimizer and ckpt.opt else 0,
    }
    header_bytes = canonical_json(header).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for name in order:
        blob += np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes()
    if header["has_optimizer"]:
        for name in order:
            blob += np.ascontiguousarray(ckpt.opt.m[name], dtype="<f4").tobytes()
        for name in order:
            blob += np.ascontiguousarray(ckpt.opt.v[name], dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack_from("<I", blob, 8)[0]
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    model = ModelConfig(**header["model"])
    shapes = model_param_shapes(model)
    if header["param_order"] != list(shapes):
        raise DataError(f"{path}: parameter order does not match the model config")

    offset = 12 + header_len

    def read_arrays() -> dict[str, np.ndarray]:
        nonlocal offset
        out = {}
        for name in header["param_order"]:
            shape = shapes[name]
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            out[name] = arr.reshape(shape).copy()
        return out

    params = read_arrays()
    opt = None
    if header["has_optimizer"]:
        m = read_arrays()
        v = read_arrays()
        opt = OptState(m=m, v=v, step=header["opt_step"])
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after parameter arrays")
    return Checkpoint(
        model=model,
        params=params,
        vocab_digest=header["vocab_digest"],
        dict_digest=header["dict_digest"],
        step=header["step"],
        seed=header["rng"]["seed"],
        phase=header["phase"],
        opt=opt,
    )


# ---------------------------------------------------------------------------
# Metrics log


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, records in (("metrics.jsonl", self.epochs), ("steps.jsonl", self.steps)):
            lines = [json.dumps(r) for r in records]
            atomic_write_text(
                os.path.join(out_dir, name), "\n".join(lines) + "\n" if lines else ""
            )


# ---------------------------------------------------------------------------
# Prediction


def predict_term_sets(
    params: dict[str, np.ndarray],
    model: ModelConfig,
    vocab: Vocab,
    dictionary: TermDictionary,
    queries: Sequence[LabeledQuery],
    n: int,
    max_len: int,
    batch_size: int = 32,
) -> dict[str, set[int]]:
    """Predict the full term set for each query.

    Every dictionary term is packed into ceil(N / n) fixed sequences; each
    query is scored against each sequence and the selected terms unioned.
    """
    tune_allocator()
    sequences = pack_term_sequences(range(len(dictionary)), n)
    flat: list[tuple[str, int, PackedExample]] = []
    for q in queries:
        for si, seq in enumerate(sequences):
            flat.append(
                (q.query_id, si,
                 assemble_msf_example(vocab, dictionary, seq, q.query, None, max_len))
            )
    chosen: dict[str, list[tuple[tuple[int, ...], list[int]]]] = {
        q.query_id: [] for q in queries
    }
    with single_thread_blas():
        for start in range(0, len(flat), batch_size):
            part = flat[start : start + batch_size]
            batch = collate([e for _, _, e in part])
            states, _ = forward_batch(
                params, model, batch.token_ids, batch.segment_ids, batch.lengths
            )
            for i, (qid, si, ex) in enumerate(part):
                probs = match_probabilities(params, states[i], ex.eot_positions)
                chosen[qid].append((sequences[si].term_ids, decide(probs)))
    return {qid: aggregate_predictions(parts) for qid, parts in chosen.items()}


def evaluate_queries(
    params: dict[str, np.ndarray],
    model: ModelConfig,
    vocab: Vocab,
    dictionary: TermDictionary,
    queries: Sequence[LabeledQuery],
    n: int,
    max_len: int,
    batch_size: int = 32,
) -> Metrics:
    preds = predict_term_sets(
        params, model, vocab, dictionary, queries, n, max_len, batch_size
    )
    golds = {q.query_id: set(q.gold_term_ids) for q in queries}
    return compute_metrics(preds, golds, range(len(dictionary)))


class _CachedEvaluator:
    """Pre-assembled evaluation set for the per-epoch metric passes."""

    def __init__(self, vocab, dictionary, queries, n, max_len, batch_size):
        self.dictionary = dictionary
        self.batch_size = batch_size
        self.sequences = pack_term_sequences(range(len(dictionary)), n)
        self.golds = {q.query_id: set(q.gold_term_ids) for q in queries}
        self.flat = [
            (q.query_id, si,
             assemble_msf_example(vocab, dictionary, seq, q.query, None, max_len))
            for q in queries
            for si, seq in enumerate(self.sequences)
        ]

    def evaluate(self, params, model) -> Metrics:
        chosen: dict[str, list] = {qid: [] for qid in self.golds}
        for start in range(0, len(self.flat), self.batch_size):
            part = self.flat[start : start + self.batch_size]
            batch = collate([e for _, _, e in part])
            states, _ = forward_batch(
                params, model, batch.token_ids, batch.segment_ids, batch.lengths
            )
            for i, (qid, si, ex) in enumerate(part):
                probs = match_probabilities(params, states[i], ex.eot_positions)
                chosen[qid].append((self.sequences[si].term_ids, decide(probs)))
        preds = {qid: aggregate_predictions(parts) for qid, parts in chosen.items()}
        return compute_metrics(preds, self.golds, range(len(self.dictionary)))


# ---------------------------------------------------------------------------
# Training loops


def run_pretraining(
    dictionary: TermDictionary,
    pairs: Sequence[DialogueTermsPair],
    config: TrainConfig,
    vocab: Vocab | None = None,
    out_dir: str | None = None,
    workers: int = 1,
) -> tuple[Checkpoint, TrainLog]:
    """Train the discrimination + mask objectives over dialogue-terms pairs.

    Term sampling and masking are re-derived per (epoch, dialogue) from the
    config seed. A checkpoint is written at each epoch end when out_dir is
    given, plus a final `pretrained.ckpt`.
    """
    config.validate()
    usable = [p for p in pairs if p.matches]
    if not usable:
        raise DataError("no dialogue has any retrieved term; nothing to pretrain on")
    if vocab is None:
        vocab = build_vocab(
            dictionary, (text for p in usable for _, text in p.turns)
        )
    model = resolve_model(config, vocab)
    params = init_model_params(model, config.seed)
    opt = init_opt_state(params)
    log = TrainLog()

    assembler = ExampleAssembler(
        {
            "vocab": vocab,
            "dictionary": dictionary,
            "pairs": usable,
            "n": config.n,
            "pos_ratio": config.pos_ratio,
            "max_len": config.max_len,
        },
        workers=workers,
    )
    ckpt = Checkpoint(
        model=model,
        params=params,
        vocab_digest=vocab.digest(),
        dict_digest=dictionary.digest(),
        step=0,
        seed=config.seed,
        phase="pretrain",
        opt=opt,
    )
    tune_allocator()
    try:
        step = 0
        with single_thread_blas():
            for epoch in range(config.epochs):
                rng = np.random.Generator(
                    np.random.PCG64(subseed(config.seed, "epoch-order", epoch))
                )
                order = rng.permutation(len(usable))
                epoch_steps: list[dict] = []
                for start in range(0, len(order), config.batch_size):
                    chunk = order[start : start + config.batch_size]
                    jobs = [
                        (
                            "pretrain",
                            int(i),
                            pretrain_example_seed(
                                config.seed, epoch, usable[int(i)].dialogue_id
                            ),
                        )
                        for i in chunk
                    ]
                    batch = collate(assembler.run(jobs))
                    result = batch_losses(
                        params, model, batch, "pretrain", lam=config.lam,
                        train=True, dropout_seed=subseed(config.seed, "dropout", step),
                    )
                    clip_gradients(result.grads, config.clip_norm)
                    adamw_step(
                        params, result.grads, opt, config.lr,
                        weight_decay=config.weight_decay,
                    )
                    step += 1
                    record = {
                        "step": step,
                        "epoch": epoch + 1,
                        "loss_ctd": result.match,
                        "loss_mmtm": result.mlm,
                        "loss_pretrain": result.combined,
                    }
                    log.steps.append(record)
                    epoch_steps.append(record)
                ckpt.step = step
                log.epochs.append(
                    {
                        "epoch": epoch + 1,
                        "loss_ctd": _mean(r["loss_ctd"] for r in epoch_steps),
                        "loss_mmtm": _mean(r["loss_mmtm"] for r in epoch_steps),
                        "loss_pretrain": _mean(r["loss_pretrain"] for r in epoch_steps),
                    }
                )
                if out_dir is not None:
                    save_checkpoint(
                        ckpt, os.path.join(out_dir, f"pretrain-epoch{epoch + 1:03d}.ckpt")
                    )
        if out_dir is not None:
            save_checkpoint(ckpt, os.path.join(out_dir, "pretrained.ckpt"))
            log.write(out_dir)
    finally:
        assembler.close()
    return ckpt, log


def run_finetuning(
    dictionary: TermDictionary,
    train: Sequence[LabeledQuery],
    dev: Sequence[LabeledQuery],
    config: TrainConfig,
    init: Checkpoint | str | None = None,
    vocab: Vocab | None = None,
    out_dir: str | None = None,
    workers: int = 1,
) -> tuple[Checkpoint, TrainLog]:
    """Fine-tune the matching objective; keeps the best-dev checkpoint.

    When `init` is given, the vocabulary must be the one the checkpoint was
    trained with and the dictionary must match its digest.
    """
    config.validate()
    if not train:
        raise DataError("empty fine-tuning training set")
    if isinstance(init, str):
        init = load_checkpoint(init)

    if init is not None:
        if vocab is None:
            raise DataError("fine-tuning from a checkpoint requires its vocabulary")
        if vocab.digest() != init.vocab_digest:
            raise DataError(
                "vocabulary digest does not match the checkpoint "
                f"({vocab.digest()[:12]} vs {init.vocab_digest[:12]})"
            )
        if dictionary.digest() != init.dict_digest:
            raise DataError("dictionary digest does not match the checkpoint")
        model = replace(init.model, dtype=config.model.dtype)
        if config.max_len > model.max_len:
            raise DataError(
                f"max_len {config.max_len} exceeds checkpoint max_len {model.max_len}"
            )
        params = {k: v.astype(model.np_dtype) for k, v in init.params.items()}
    else:
        if vocab is None:
            texts = [q.query for q in train] + [q.query for q in dev]
            vocab = build_vocab(dictionary, texts)
        model = resolve_model(config, vocab)
        params = init_model_params(model, config.seed)

    opt = init_opt_state(params)
    sequences = pack_term_sequences(range(len(dictionary)), config.n)
    assembler = ExampleAssembler(
        {
            "vocab": vocab,
            "dictionary": dictionary,
            "queries": list(train),
            "sequences": sequences,
            "max_len": config.max_len,
        },
        workers=workers,
    )
    try:
        jobs = [
            ("finetune", qi, si)
            for qi in range(len(train))
            for si in range(len(sequences))
        ]
        examples = assembler.run(jobs)
    finally:
        assembler.close()

    log = TrainLog()
    best_params = {k: v.copy() for k, v in params.items()}
    best_f1 = -1.0
    best_epoch = 0
    step = 0
    tune_allocator()
    eval_batch = max(config.batch_size, 32)
    dev_eval = (
        _CachedEvaluator(vocab, dictionary, dev, config.n, config.max_len, eval_batch)
        if dev else None
    )
    train_eval = (
        _CachedEvaluator(vocab, dictionary, train, config.n, config.max_len, eval_batch)
        if config.early_stop_train_f1 is not None else None
    )
    with single_thread_blas():
        for epoch in range(config.epochs):
            rng = np.random.Generator(
                np.random.PCG64(subseed(config.seed, "epoch-order", epoch))
            )
            order = rng.permutation(len(examples))
            epoch_losses: list[float] = []
            for start in range(0, len(order), config.batch_size):
                batch = collate([examples[int(i)] for i in order[start : start + config.batch_size]])
                result = batch_losses(
                    params, model, batch, "match",
                    train=True, dropout_seed=subseed(config.seed, "dropout", step),
                )
                clip_gradients(result.grads, config.clip_norm)
                adamw_step(
                    params, result.grads, opt, config.lr,
                    weight_decay=config.weight_decay,
                )
                step += 1
                epoch_losses.append(result.combined)
            dev_f1 = None
            if dev_eval is not None:
                dev_f1 = dev_eval.evaluate(params, model).micro_f1
                if dev_f1 > best_f1:
                    best_f1 = dev_f1
                    best_epoch = epoch + 1
                    best_params = {k: v.copy() for k, v in params.items()}
            record = {
                "epoch": epoch + 1,
                "train_loss": _mean(epoch_losses),
                "dev_micro_f1": dev_f1,
            }
            train_f1 = None
            if train_eval is not None:
                train_f1 = train_eval.evaluate(params, model).micro_f1
                record["train_micro_f1"] = train_f1
            log.epochs.append(record)
            if train_f1 is not None and train_f1 >= config.early_stop_train_f1:
                break

    if not dev:
        best_params = {k: v.copy() for k, v in params.items()}
        best_epoch = config.epochs
    ckpt = Checkpoint(
        model=model,
        params=best_params,
        vocab_digest=vocab.digest(),
        dict_digest=dictionary.digest(),
        step=step,
        seed=config.seed,
        phase="finetune",
        opt=None,
    )
    log.epochs.append({"best_epoch": best_epoch, "best_dev_micro_f1": best_f1 if dev else None})
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, "finetuned.ckpt"))
        log.write(out_dir)
    return ckpt, log


def _mean(values: Iterable[float]) -> float:
    items = list(values)
    return sum(items) / len(items) if items else 0.0
