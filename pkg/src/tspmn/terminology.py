"""Term dictionary and multi-pattern substring retrieval.

The dictionary holds formal term surfaces, each with a single slot category.
Retrieval reports every occurrence of every surface in a text in one pass
over the characters, using an Aho-Corasick automaton built once per
dictionary. Overlapping occurrences are all reported; a surface that is a
substring of another surface matches wherever it occurs.

All matching happens in a fixed normalized space (NFKC plus lowercased Latin
letters). Span offsets index into the normalized text, which downstream
character-level tokenization maps 1:1 onto token positions.
"""

from __future__ import annotations

import unicodedata
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

from .util import DataError, sha256_hex

_LOWER_CACHE: dict[str, str] = {}


def _lower_latin(ch: str) -> str:
    # Lowercase only Latin capitals, and only when the lowered form is a
    # single character, so offsets never shift.
    cached = _LOWER_CACHE.get(ch)
    if cached is not None:
        return cached
    out = ch
    if "A" <= ch <= "Z":
        out = ch.lower()
    elif ord(ch) > 0x7F and ch.isupper():
        try:
            if unicodedata.name(ch).startswith("LATIN"):
                lowered = ch.lower()
                if len(lowered) == 1:
                    out = lowered
        except ValueError:
            pass
    _LOWER_CACHE[ch] = out
    return out


def normalize_text(text: str) -> str:
    """NFKC-normalize and lowercase Latin letters, length-stable per char."""
    return "".join(_lower_latin(ch) for ch in unicodedata.normalize("NFKC", text))


@dataclass(frozen=True)
class TermEntry:
    term_id: int
    surface: str
    slot: str


@dataclass(frozen=True)
class TermMatch:
    """All occurrences of one term in one text; spans are (start, end)."""

    term_id: int
    spans: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class DialogueTermMatch:
    """All occurrences of one term in a dialogue; spans are (turn, start, end)."""

    term_id: int
    spans: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class DialogueTermsPair:
    """A dialogue with its retrieved term occurrences.

    Carries the normalized turn texts so pretraining example assembly is
    self-contained; span offsets index into those texts.
    """

    dialogue_id: str
    turns: tuple[tuple[str, str], ...]  # (speaker, normalized text)
    matches: tuple[DialogueTermMatch, ...]

    @property
    def term_ids(self) -> tuple[int, ...]:
        return tuple(m.term_id for m in self.matches)


class _Automaton:
    """Aho-Corasick automaton over normalized characters.

    States are integers; `goto` is a per-state dict of character
    transitions, `fail` the longest-proper-suffix fallback, and `out` the
    term ids whose surface ends at the state (failure-chain outputs merged
    in at build time so reporting is O(matches)).
    """

    def __init__(self, surfaces: dict[int, str]):
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._out: list[list[int]] = [[]]
        for term_id in sorted(surfaces):
            self._insert(surfaces[term_id], term_id)
        self._build_failures()

    def _insert(self, surface: str, term_id: int) -> None:
        state = 0
        for ch in surface:
            nxt = self._goto[state].get(ch)
            if nxt is None:
                nxt = len(self._goto)
                self._goto.append({})
                self._fail.append(0)
                self._out.append([])
                self._goto[state][ch] = nxt
            state = nxt
        self._out[state].append(term_id)

    def _build_failures(self) -> None:
        queue: deque[int] = deque()
        for child in self._goto[0].values():
            queue.append(child)
        while queue:
            state = queue.popleft()
            for ch, child in self._goto[state].items():
                fallback = self._fail[state]
                while fallback and ch not in self._goto[fallback]:
                    fallback = self._fail[fallback]
                target = self._goto[fallback].get(ch, 0)
                if target == child:
                    target = 0
                self._fail[child] = target
                self._out[child] = self._out[child] + self._out[target]
                queue.append(child)

    def scan(self, text: str) -> Iterator[tuple[int, int]]:
        """Yield (term_id, end_offset_exclusive) for every occurrence."""
        goto = self._goto
        fail = self._fail
        out = self._out
        state = 0
        for i, ch in enumerate(text):
            while state and ch not in goto[state]:
                state = fail[state]
            state = goto[state].get(ch, 0)
            if out[state]:
                end = i + 1
                for term_id in out[state]:
                    yield term_id, end


class TermDictionary:
    """Immutable term dictionary with a shared retrieval automaton.

    Surfaces are stored normalized; ids are contiguous 0..N-1 in order of
    first occurrence at build time. Safe to share across workers.
    """

    def __init__(self, entries: list[TermEntry]):
        self.entries = entries
        self._by_surface = {e.surface: e.term_id for e in entries}
        self.slots = sorted({e.slot for e in entries})
        self._automaton: _Automaton | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TermEntry]:
        return iter(self.entries)

    def surface(self, term_id: int) -> str:
        return self.entries[term_id].surface

    def slot(self, term_id: int) -> str:
        return self.entries[term_id].slot

    def term_id_of(self, surface: str) -> int | None:
        return self._by_surface.get(normalize_text(surface))

    def automaton(self) -> _Automaton:
        if self._automaton is None:
            self._automaton = _Automaton(
                {e.term_id: e.surface for e in self.entries}
            )
        return self._automaton

    def digest(self) -> str:
        body = "\n".join(f"{e.surface}\t{e.slot}" for e in self.entries)
        return sha256_hex(body.encode("utf-8"))


def build_dictionary(entries: Iterable[tuple[str, str]]) -> TermDictionary:
    """Normalize, deduplicate, and id surface/slot pairs in input order.

    Raises DataError for an empty entry list, an empty surface, or two
    entries giving the same surface conflicting slots.
    """
    built: list[TermEntry] = []
    by_surface: dict[str, TermEntry] = {}
    count = 0
    for surface, slot in entries:
        count += 1
        norm = normalize_text(surface)
        if not norm:
            raise DataError(f"empty term surface at entry {count}: {surface!r}")
        if not slot:
            raise DataError(f"empty slot for surface {norm!r}")
        existing = by_surface.get(norm)
        if existing is not None:
            if existing.slot != slot:
                raise DataError(
                    f"conflicting slots for surface {norm!r}: "
                    f"{existing.slot!r} vs {slot!r}"
                )
            continue
        entry = TermEntry(term_id=len(built), surface=norm, slot=slot)
        built.append(entry)
        by_surface[norm] = entry
    if count == 0:
        raise DataError("cannot build a dictionary from zero entries")
    return TermDictionary(built)


def retrieve_terms(dictionary: TermDictionary, text: str) -> list[TermMatch]:
    """Find every dictionary surface occurring in the normalized text.

    Returns one TermMatch per matched term, ordered by term_id, with all
    occurrence spans (start, end) into the normalized text.
    """
    norm = normalize_text(text)
    spans: dict[int, list[tuple[int, int]]] = {}
    for term_id, end in dictionary.automaton().scan(norm):
        start = end - len(dictionary.surface(term_id))
        spans.setdefault(term_id, []).append((start, end))
    return [
        TermMatch(term_id=t, spans=tuple(sorted(spans[t])))
        for t in sorted(spans)
    ]


def make_dialogue_terms_pairs(
    dictionary: TermDictionary, dialogues: Iterable
) -> Iterator[DialogueTermsPair]:
    """Pair each dialogue with the terms retrieved from all its turns.

    Dialogues with zero matches are still emitted (with empty matches);
    whether to train on them is a sampling-policy decision downstream.
    """
    automaton = dictionary.automaton()
    for dialogue in dialogues:
        turns = tuple(
            (turn.speaker, normalize_text(turn.text)) for turn in dialogue.turns
        )
        spans: dict[int, list[tuple[int, int, int]]] = {}
        for turn_index, (_, text) in enumerate(turns):
            for term_id, end in automaton.scan(text):
                start = end - len(dictionary.surface(term_id))
                spans.setdefault(term_id, []).append((turn_index, start, end))
        matches = tuple(
            DialogueTermMatch(term_id=t, spans=tuple(sorted(spans[t])))
            for t in sorted(spans)
        )
        yield DialogueTermsPair(
            dialogue_id=dialogue.dialogue_id, turns=turns, matches=matches
        )


def load_dictionary_tsv(path: str) -> TermDictionary:
    """Read a `surface<TAB>slot` TSV; `#` comments and blank lines ignored."""
    entries: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected `surface<TAB>slot`, got {line!r}"
                )
            entries.append((parts[0], parts[1]))
    if not entries:
        raise DataError(f"{path}: no term entries found")
    return build_dictionary(entries)


def save_dictionary_tsv(dictionary: TermDictionary, path: str) -> None:
    from .util import atomic_write_text

    lines = [f"{e.surface}\t{e.slot}" for e in dictionary.entries]
    atomic_write_text(path, "\n".join(lines) + "\n")
