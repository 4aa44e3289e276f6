"""Dialogue/query ingestion, synthetic world generation, few-shot sampling.

The synthetic world reproduces the colloquial/formal mismatch this library
exists to handle: every term has colloquial paraphrase surfaces that never
appear in the dictionary. Dialogues pair a patient turn written with
paraphrases against a doctor turn written with the formal terms, and labeled
queries are written mostly (in the test split at least half) with
paraphrases while their gold labels are the formal terms.

Generated surfaces use a character alphabet disjoint from the filler
alphabet and are pairwise substring-free, so "which terms occur in this
text" has exactly one answer and can be recomputed independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .terminology import TermDictionary, build_dictionary
from .util import DataError, atomic_write_text, subseed

PATIENT = "P"
DOCTOR = "D"
SPEAKERS = (PATIENT, DOCTOR)

SLOT_NAMES = ("Symptom", "Medicine", "Examination", "Treatment")

_SURFACE_ALPHABET = "abcdefghij"
_FILLER_ALPHABET = "nopqrstuvwxyz"


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class LabeledQuery:
    query_id: str
    query: str
    gold: frozenset[tuple[str, int]]  # (slot, term_id)

    @property
    def gold_term_ids(self) -> frozenset[int]:
        return frozenset(t for _, t in self.gold)


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the generated world. Deterministic function of `seed`."""

    term_count: int
    paraphrases_per_term: tuple[int, int]
    dialogue_count: int
    query_count: int
    terms_per_query: tuple[int, int]
    seed: int
    slot_count: int = 2
    terms_per_dialogue: tuple[int, int] = (1, 3)
    colloquial_rate: float = 0.75
    train_fraction: float = 0.6
    dev_fraction: float = 0.2
    surface_len: tuple[int, int] = (3, 5)

    def validate(self) -> None:
        for name in ("term_count", "dialogue_count", "query_count"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        for name in ("paraphrases_per_term", "terms_per_query", "terms_per_dialogue"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise DataError(f"{name} must be a range 1 <= lo <= hi")
        if not 1 <= self.slot_count <= len(SLOT_NAMES):
            raise DataError(f"slot_count must be in 1..{len(SLOT_NAMES)}")
        if not 0.0 <= self.colloquial_rate <= 1.0:
            raise DataError("colloquial_rate must be in [0, 1]")
        if self.train_fraction + self.dev_fraction >= 1.0:
            raise DataError("train_fraction + dev_fraction must leave room for test")
        if self.terms_per_query[1] > self.term_count:
            raise DataError("terms_per_query upper bound exceeds term_count")
        lo, hi = self.surface_len
        if not 2 <= lo <= hi:
            raise DataError("surface_len must be a range with lo >= 2")


@dataclass
class SyntheticWorld:
    dictionary: TermDictionary
    dialogues: list[Dialogue]
    train: list[LabeledQuery]
    dev: list[LabeledQuery]
    test: list[LabeledQuery]
    paraphrases: list[tuple[str, str]] = field(default_factory=list)  # (formal, paraphrase)

    def paraphrases_of(self, surface: str) -> list[str]:
        return [p for f, p in self.paraphrases if f == surface]


def _fresh_surface(
    rng: np.random.Generator, taken: list[str], lo: int, hi: int
) -> str:
    # Pairwise substring-freedom keeps occurrence checks unambiguous.
    while True:
        length = int(rng.integers(lo, hi + 1))
        chars = rng.integers(0, len(_SURFACE_ALPHABET), size=length)
        candidate = "".join(_SURFACE_ALPHABET[c] for c in chars)
        if all(candidate not in t and t not in candidate for t in taken):
            return candidate


def _colloquial_variant(
    rng: np.random.Generator, formal: str, taken: list[str]
) -> str:
    """A paraphrase: the formal surface with every other character replaced.

    The shared characters let a matcher localize the mention; the replaced
    ones are arbitrary per variant, so the variant-to-term association must
    be learned from co-occurrence, not inferred from any rule.
    """
    for _ in range(500):
        chars = list(formal)
        for i in range(int(rng.integers(0, 2)), len(chars), 2):
            chars[i] = _SURFACE_ALPHABET[int(rng.integers(0, len(_SURFACE_ALPHABET)))]
        candidate = "".join(chars)
        if candidate != formal and all(
            candidate not in t and t not in candidate for t in taken
        ):
            return candidate
    # Dense neighborhoods (tiny alphabets) fall back to a fresh pseudo-word.
    return _fresh_surface(rng, taken, len(formal), len(formal))


def _filler(rng: np.random.Generator, words: int) -> list[str]:
    out = []
    for _ in range(words):
        length = int(rng.integers(2, 5))
        chars = rng.integers(0, len(_FILLER_ALPHABET), size=length)
        out.append("".join(_FILLER_ALPHABET[c] for c in chars))
    return out


def _weave(rng: np.random.Generator, surfaces: list[str]) -> str:
    """Interleave surfaces with filler words into a space-joined text."""
    parts: list[str] = _filler(rng, 1)
    for s in surfaces:
        parts.append(s)
        parts.extend(_filler(rng, 1))
    return " ".join(parts)


def generate_synthetic_world(spec: SynthSpec) -> SyntheticWorld:
    """Build dictionary, pretraining dialogues, query splits, paraphrase table.

    Byte-identical output for identical specs. Test queries render at least
    half of their gold terms colloquially (no literal surface in the text);
    train/dev queries render each gold term colloquially with probability
    `colloquial_rate`.
    """
    spec.validate()

    rng_terms = np.random.Generator(np.random.PCG64(subseed(spec.seed, "terms")))
    taken: list[str] = []
    surfaces: list[str] = []
    for _ in range(spec.term_count):
        s = _fresh_surface(rng_terms, taken, *spec.surface_len)
        surfaces.append(s)
        taken.append(s)
    entries = [
        (s, SLOT_NAMES[i % spec.slot_count]) for i, s in enumerate(surfaces)
    ]
    dictionary = build_dictionary(entries)

    paraphrases: list[tuple[str, str]] = []
    per_term: list[list[str]] = []
    lo, hi = spec.paraphrases_per_term
    for i, s in enumerate(surfaces):
        count = int(rng_terms.integers(lo, hi + 1))
        mine = []
        for _ in range(count):
            p = _colloquial_variant(rng_terms, s, taken)
            taken.append(p)
            mine.append(p)
            paraphrases.append((s, p))
        per_term.append(mine)

    dialogues: list[Dialogue] = []
    d_lo, d_hi = spec.terms_per_dialogue
    for i in range(spec.dialogue_count):
        rng = np.random.Generator(np.random.PCG64(subseed(spec.seed, "dialogue", i)))
        size = int(rng.integers(d_lo, min(d_hi, spec.term_count) + 1))
        term_ids = rng.choice(spec.term_count, size=size, replace=False)
        colloquial = [
            per_term[t][int(rng.integers(0, len(per_term[t])))] for t in term_ids
        ]
        formal = [surfaces[t] for t in term_ids]
        rng.shuffle(formal)
        dialogues.append(
            Dialogue(
                dialogue_id=f"d{i:05d}",
                turns=(
                    Turn(PATIENT, _weave(rng, colloquial)),
                    Turn(DOCTOR, _weave(rng, formal)),
                ),
            )
        )

    queries: list[LabeledQuery] = []
    q_lo, q_hi = spec.terms_per_query
    n_train = int(spec.query_count * spec.train_fraction)
    n_dev = int(spec.query_count * spec.dev_fraction)
    for j in range(spec.query_count):
        rng = np.random.Generator(np.random.PCG64(subseed(spec.seed, "query", j)))
        size = int(rng.integers(q_lo, q_hi + 1))
        term_ids = list(rng.choice(spec.term_count, size=size, replace=False))
        is_test = j >= n_train + n_dev
        forced_colloquial = math.ceil(size / 2) if is_test else 0
        rendered: list[str] = []
        for rank, t in enumerate(term_ids):
            colloquial = rank < forced_colloquial or rng.random() < spec.colloquial_rate
            if colloquial:
                rendered.append(per_term[t][int(rng.integers(0, len(per_term[t])))])
            else:
                rendered.append(surfaces[t])
        order = rng.permutation(size)
        queries.append(
            LabeledQuery(
                query_id=f"q{j:05d}",
                query=_weave(rng, [rendered[k] for k in order]),
                gold=frozenset(
                    (dictionary.slot(t), int(t)) for t in term_ids
                ),
            )
        )

    return SyntheticWorld(
        dictionary=dictionary,
        dialogues=dialogues,
        train=queries[:n_train],
        dev=queries[n_train : n_train + n_dev],
        test=queries[n_train + n_dev :],
        paraphrases=paraphrases,
    )


def sample_few_shot(
    train: list[LabeledQuery], k: int, seed: int = 0
) -> list[LabeledQuery]:
    """Select a subset covering each supported term with min(k, support) queries.

    Greedy and fully deterministic: coverage is raised one round at a time
    (round r guarantees min(r, support) per term), iterating terms in id
    order and taking the earliest supporting queries, so the k-shot subset
    is always contained in the (k+1)-shot subset. `seed` is accepted for
    interface stability but the rule needs no randomness.
    """
    del seed
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not train:
        raise DataError("cannot sample from an empty training set")

    supporting: dict[int, list[int]] = {}
    for idx, query in enumerate(train):
        for t in query.gold_term_ids:
            supporting.setdefault(t, []).append(idx)

    selected: set[int] = set()
    coverage: dict[int, int] = {t: 0 for t in supporting}
    for r in range(1, k + 1):
        for t in sorted(supporting):
            need = min(r, len(supporting[t]))
            if coverage[t] >= need:
                continue
            for idx in supporting[t]:
                if idx in selected:
                    continue
                selected.add(idx)
                for u in train[idx].gold_term_ids:
                    if u in coverage:
                        coverage[u] += 1
                if coverage[t] >= need:
                    break
    return [train[idx] for idx in sorted(selected)]


# ---------------------------------------------------------------------------
# JSONL / TSV interchange


def write_dialogues_jsonl(path: str, dialogues: Iterable[Dialogue]) -> None:
    lines = []
    for d in dialogues:
        lines.append(
            json.dumps(
                {
                    "dialogue_id": d.dialogue_id,
                    "turns": [
                        {"speaker": t.speaker, "text": t.text} for t in d.turns
                    ],
                },
                ensure_ascii=False,
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def load_dialogues_jsonl(path: str) -> list[Dialogue]:
    dialogues: list[Dialogue] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                dialogue_id = record["dialogue_id"]
                raw_turns = record["turns"]
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
            if dialogue_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate dialogue_id {dialogue_id!r}")
            seen.add(dialogue_id)
            if not raw_turns:
                raise DataError(f"{path}:{lineno}: dialogue has no turns")
            turns = []
            for t in raw_turns:
                speaker = t.get("speaker")
                text = t.get("text")
                if speaker not in SPEAKERS:
                    raise DataError(
                        f"{path}:{lineno}: unknown speaker {speaker!r} "
                        f"(expected one of {SPEAKERS})"
                    )
                if not text:
                    raise DataError(f"{path}:{lineno}: empty turn text")
                turns.append(Turn(speaker, text))
            dialogues.append(Dialogue(dialogue_id, tuple(turns)))
    return dialogues


def write_queries_jsonl(
    path: str, queries: Iterable[LabeledQuery], dictionary: TermDictionary
) -> None:
    lines = []
    for q in queries:
        labels = [
            {"slot": slot, "value": dictionary.surface(t)}
            for slot, t in sorted(q.gold, key=lambda p: p[1])
        ]
        lines.append(
            json.dumps(
                {"query_id": q.query_id, "query": q.query, "labels": labels},
                ensure_ascii=False,
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def load_queries_jsonl(path: str, dictionary: TermDictionary) -> list[LabeledQuery]:
    """Load labeled queries, resolving label values to term ids.

    A label whose value is not a dictionary surface, or whose slot differs
    from the dictionary slot for that term, is a DataError naming the line.
    """
    queries: list[LabeledQuery] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                query_id = record["query_id"]
                query = record["query"]
                labels = record["labels"]
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
            if query_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate query_id {query_id!r}")
            seen.add(query_id)
            gold = set()
            for label in labels:
                slot, value = label.get("slot"), label.get("value")
                term_id = dictionary.term_id_of(value or "")
                if term_id is None:
                    raise DataError(
                        f"{path}:{lineno}: label value {value!r} is not in the dictionary"
                    )
                if dictionary.slot(term_id) != slot:
                    raise DataError(
                        f"{path}:{lineno}: slot {slot!r} does not match dictionary "
                        f"slot {dictionary.slot(term_id)!r} for {value!r}"
                    )
                gold.add((slot, term_id))
            queries.append(LabeledQuery(query_id, query, frozenset(gold)))
    return queries


def load_dataset(path: str, dictionary: TermDictionary | None = None):
    """Dispatch on the first record's fields: dialogues or labeled queries."""
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline()
    if not first.strip():
        raise DataError(f"{path}: empty dataset file")
    try:
        record = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: invalid JSON: {exc}") from exc
    if "dialogue_id" in record:
        return load_dialogues_jsonl(path)
    if "query_id" in record:
        if dictionary is None:
            raise DataError("loading labeled queries requires a dictionary")
        return load_queries_jsonl(path, dictionary)
    raise DataError(f"{path}: unrecognized record shape on line 1")


def write_paraphrases_tsv(path: str, paraphrases: Iterable[tuple[str, str]]) -> None:
    lines = [f"{formal}\t{para}" for formal, para in paraphrases]
    atomic_write_text(path, "\n".join(lines) + "\n" if lines else "")


def load_paraphrases_tsv(path: str) -> list[tuple[str, str]]:
    pairs: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected `formal<TAB>paraphrase`")
            pairs.append((parts[0], parts[1]))
    return pairs


def validate_queries(queries: Iterable[LabeledQuery], dictionary: TermDictionary) -> None:
    for q in queries:
        for slot, term_id in q.gold:
            if not 0 <= term_id < len(dictionary):
                raise DataError(f"{q.query_id}: gold term id {term_id} out of range")
            if dictionary.slot(term_id) != slot:
                raise DataError(
                    f"{q.query_id}: gold slot {slot!r} does not match dictionary"
                )
