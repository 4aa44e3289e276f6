"""Model input assembly.

Two input shapes share one layout, `[CLS] term-sequence [SEP] body [SEP]`
with segment 0 up to and including the first [SEP] and segment 1 after:

* matching inputs: body is a query; per-term labels say whether the term
  is mentioned.
* pretraining inputs: body is a dialogue rendered as a separator-free flow
  `[P] turn [D] turn ...`; the term sequence mixes sampled positive terms
  (present in the dialogue) with negatives (absent from it), and every
  occurrence of a sampled positive inside the body is replaced by [MASK],
  one mask per character, with the original ids kept as prediction targets.

The term sequence is never truncated (each term must keep its [EOT]
anchor); the body is truncated from the right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .terminology import DialogueTermsPair, TermDictionary, normalize_text
from .textcodec import Vocab, encode_text
from .util import DataError, atomic_write_text, subseed


@dataclass(frozen=True)
class TermSequence:
    term_ids: tuple[int, ...]


@dataclass
class PackedExample:
    token_ids: list[int]
    segment_ids: list[int]
    eot_positions: list[int]
    term_ids: list[int]
    labels: list[bool] | None = None
    mask_positions: list[int] = field(default_factory=list)
    mlm_targets: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def pack_term_sequences(
    term_ids: Sequence[int], n: int, seed: int | None = None
) -> list[TermSequence]:
    """Partition term ids into ceil(len/n) sequences of at most n terms.

    Order is ascending by id when seed is None, a seeded permutation
    otherwise; every input id lands in exactly one sequence.
    """
    if n < 1:
        raise DataError(f"terms per sequence must be >= 1, got {n}")
    ids = list(term_ids)
    if not ids:
        raise DataError("cannot pack an empty term list")
    if len(set(ids)) != len(ids):
        raise DataError("term ids must be unique")
    if seed is None:
        ordered = sorted(ids)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        ordered = [ids[i] for i in rng.permutation(len(ids))]
    return [
        TermSequence(term_ids=tuple(ordered[i : i + n]))
        for i in range(0, len(ordered), n)
    ]


def _term_sequence_tokens(
    vocab: Vocab, dictionary: TermDictionary, seq: TermSequence
) -> tuple[list[int], list[int]]:
    tokens: list[int] = []
    eots: list[int] = []
    for term_id in seq.term_ids:
        tokens.extend(encode_text(vocab, dictionary.surface(term_id)))
        eots.append(len(tokens) + 1)  # +1 for the leading [CLS]
        tokens.append(vocab.eot_id)
    return tokens, eots


def assemble_msf_example(
    vocab: Vocab,
    dictionary: TermDictionary,
    seq: TermSequence,
    query: str,
    gold_term_ids: Iterable[int] | None,
    max_len: int,
) -> PackedExample:
    """Pack one term sequence against a query.

    labels[i] is True iff seq.term_ids[i] is in the gold set; labels is
    None when no gold set is given (inference). The query is truncated from
    the right if the total would exceed max_len.
    """
    seq_tokens, eots = _term_sequence_tokens(vocab, dictionary, seq)
    head = [vocab.cls_id] + seq_tokens + [vocab.sep_id]
    if len(head) + 2 > max_len:
        raise DataError(
            f"term sequence needs {len(head) + 2} tokens, over max_len={max_len}"
        )
    body = encode_text(vocab, normalize_text(query))
    budget = max_len - len(head) - 1
    body = body[:budget]
    token_ids = head + body + [vocab.sep_id]
    segment_ids = [0] * len(head) + [1] * (len(body) + 1)
    labels = None
    if gold_term_ids is not None:
        gold = set(gold_term_ids)
        labels = [t in gold for t in seq.term_ids]
    return PackedExample(
        token_ids=token_ids,
        segment_ids=segment_ids,
        eot_positions=eots,
        term_ids=list(seq.term_ids),
        labels=labels,
    )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def assemble_pretrain_example(
    vocab: Vocab,
    dictionary: TermDictionary,
    pair: DialogueTermsPair,
    n: int,
    pos_ratio: float,
    seed: int,
    max_len: int,
) -> PackedExample:
    """Pack a dialogue with sampled positive and negative terms, masked.

    round(n * pos_ratio) positives are sampled from the dialogue's terms
    (never fewer than one), the remaining slots are filled with terms absent
    from the dialogue, and the combined sequence is shuffled. Every
    occurrence span of a *sampled* positive inside the dialogue is replaced
    by [MASK] (overlaps merged first); unsampled positives, negatives, and
    non-term text are left intact. Labels are the membership flags used by
    the discrimination objective.
    """
    if n < 1:
        raise DataError(f"terms per sequence must be >= 1, got {n}")
    if not 0.0 < pos_ratio < 1.0:
        raise DataError(f"pos_ratio must be in (0, 1), got {pos_ratio}")
    dialogue_terms = sorted(pair.term_ids)
    if not dialogue_terms:
        raise DataError(f"dialogue {pair.dialogue_id!r} has no positive terms")

    rng = np.random.Generator(np.random.PCG64(seed))
    n_pos = min(len(dialogue_terms), max(1, _round_half_up(n * pos_ratio)), n)
    pos_pick = rng.choice(len(dialogue_terms), size=n_pos, replace=False)
    positives = [dialogue_terms[i] for i in sorted(pos_pick)]

    in_dialogue = set(dialogue_terms)
    pool = [t for t in range(len(dictionary)) if t not in in_dialogue]
    n_neg = min(n - n_pos, len(pool))
    if n_neg:
        neg_pick = rng.choice(len(pool), size=n_neg, replace=False)
        negatives = [pool[i] for i in sorted(neg_pick)]
    else:
        negatives = []

    # Ascending id order keeps each term's slot stable across examples
    # (and identical to the fine-tuning layout when the sequence covers the
    # dictionary), which is what lets slot detectors transfer; labels stay
    # interleaved so position never leaks them.
    ordered = sorted(positives + negatives)
    in_pos = set(positives)
    seq = TermSequence(term_ids=tuple(ordered))
    labels = [t in in_pos for t in ordered]

    seq_tokens, eots = _term_sequence_tokens(vocab, dictionary, seq)
    head = [vocab.cls_id] + seq_tokens + [vocab.sep_id]
    if len(head) + 2 > max_len:
        raise DataError(
            f"term sequence needs {len(head) + 2} tokens, over max_len={max_len}"
        )

    body: list[int] = []
    turn_offsets: list[int] = []
    for speaker, text in pair.turns:
        body.append(vocab.speaker_id(speaker))
        turn_offsets.append(len(body))
        body.extend(encode_text(vocab, text))

    sampled = set(positives)
    masked_body_positions: set[int] = set()
    for match in pair.matches:
        if match.term_id not in sampled:
            continue
        for turn_index, start, end in match.spans:
            base = turn_offsets[turn_index]
            masked_body_positions.update(range(base + start, base + end))

    budget = max_len - len(head) - 1
    body = body[:budget]
    mask_positions: list[int] = []
    mlm_targets: list[int] = []
    for pos in sorted(masked_body_positions):
        if pos >= len(body):
            continue  # truncated away
        mask_positions.append(len(head) + pos)
        mlm_targets.append(body[pos])
        body[pos] = vocab.mask_id

    token_ids = head + body + [vocab.sep_id]
    segment_ids = [0] * len(head) + [1] * (len(body) + 1)
    return PackedExample(
        token_ids=token_ids,
        segment_ids=segment_ids,
        eot_positions=eots,
        term_ids=list(seq.term_ids),
        labels=labels,
        mask_positions=mask_positions,
        mlm_targets=mlm_targets,
    )


def pretrain_example_seed(root_seed: int, epoch: int, dialogue_id: str) -> int:
    """Mask/negative sampling is re-derived per (epoch, dialogue), not stored."""
    return subseed(root_seed, "pretrain-example", epoch, dialogue_id)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, L) int64
    segment_ids: np.ndarray  # (B, L) int64
    lengths: np.ndarray  # (B,) int64
    examples: list[PackedExample]

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.token_ids.shape[1])


def collate(examples: Sequence[PackedExample], pad_id: int = 0) -> Batch:
    """Right-pad examples to a rectangular batch."""
    if not examples:
        raise DataError("cannot collate an empty batch")
    lengths = np.array([len(e) for e in examples], dtype=np.int64)
    width = int(lengths.max())
    token_ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    segment_ids = np.zeros((len(examples), width), dtype=np.int64)
    for i, e in enumerate(examples):
        token_ids[i, : len(e)] = e.token_ids
        segment_ids[i, : len(e)] = e.segment_ids
    return Batch(
        token_ids=token_ids,
        segment_ids=segment_ids,
        lengths=lengths,
        examples=list(examples),
    )


# ---------------------------------------------------------------------------
# Debug dump


def dump_examples_jsonl(path: str, examples: Iterable[PackedExample]) -> None:
    lines = []
    for e in examples:
        lines.append(
            json.dumps(
                {
                    "token_ids": e.token_ids,
                    "segment_ids": e.segment_ids,
                    "eot_positions": e.eot_positions,
                    "term_ids": e.term_ids,
                    "labels": e.labels,
                    "mask_positions": e.mask_positions,
                    "mlm_targets": e.mlm_targets,
                }
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def load_examples_jsonl(path: str) -> list[PackedExample]:
    out = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
                out.append(PackedExample(**record))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad packed example: {exc}") from exc
    return out
