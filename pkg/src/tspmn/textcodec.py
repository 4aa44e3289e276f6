"""Character-level vocabulary with the special tokens the input layout needs.

One token per Unicode scalar keeps term spans and token positions aligned
1:1, so retrieval offsets translate directly into mask positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .terminology import TermDictionary, normalize_text
from .util import DataError, atomic_write_text, sha256_hex

PAD, UNK, CLS, SEP, EOT, MASK, P_MARK, D_MARK = SPECIAL_TOKENS = (
    "[PAD]",
    "[UNK]",
    "[CLS]",
    "[SEP]",
    "[EOT]",
    "[MASK]",
    "[P]",
    "[D]",
)

# Ids of the specials are fixed by their position above.
PAD_ID, UNK_ID, CLS_ID, SEP_ID, EOT_ID, MASK_ID, P_ID, D_ID = range(8)

_ESCAPES = {"\n": "\\n", "\r": "\\r", "\t": "\\t", "\\": "\\\\"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def eot_id(self) -> int:
        return 4

    @property
    def mask_id(self) -> int:
        return 5

    @property
    def p_id(self) -> int:
        return 6

    @property
    def d_id(self) -> int:
        return 7

    def speaker_id(self, speaker: str) -> int:
        return self.p_id if speaker == "P" else self.d_id

    def digest(self) -> str:
        return sha256_hex("\n".join(self.tokens).encode("utf-8"))


def build_vocab(dictionary: TermDictionary, corpora: Iterable[str] = ()) -> Vocab:
    """Specials first (fixed order), then characters in first-seen order.

    Characters come from the normalized dictionary surfaces (in id order)
    and then from the normalized corpus texts, so every dictionary surface
    encodes without UNK.
    """
    tokens: list[str] = list(SPECIAL_TOKENS)
    index: dict[str, int] = {t: i for i, t in enumerate(tokens)}
    for entry in dictionary:
        for ch in entry.surface:
            if ch not in index:
                index[ch] = len(tokens)
                tokens.append(ch)
    for text in corpora:
        for ch in normalize_text(text):
            if ch not in index:
                index[ch] = len(tokens)
                tokens.append(ch)
    return Vocab(tokens=tuple(tokens), index=index)


def encode_text(vocab: Vocab, text: str) -> list[int]:
    """One id per Unicode scalar; unknown characters become UNK."""
    unk = vocab.unk_id
    index = vocab.index
    return [index.get(ch, unk) for ch in text]


def decode_ids(vocab: Vocab, ids: Iterable[int]) -> str:
    """Diagnostic inverse; special tokens render as their bracket names."""
    return "".join(vocab.tokens[i] for i in ids)


def save_vocab(vocab: Vocab, path: str) -> None:
    lines = []
    for token in vocab.tokens:
        lines.append("".join(_ESCAPES.get(ch, ch) for ch in token))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _unescape(line: str) -> str:
    out = []
    i = 0
    while i < len(line):
        pair = line[i : i + 2]
        if pair in _UNESCAPES:
            out.append(_UNESCAPES[pair])
            i += 2
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


def load_vocab(path: str) -> Vocab:
    with open(path, "r", encoding="utf-8") as handle:
        tokens = [_unescape(line.rstrip("\n")) for line in handle]
    if tokens and tokens[-1] == "":
        tokens.pop()
    if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
        raise DataError(
            f"{path}: vocab must start with specials {SPECIAL_TOKENS}"
        )
    if len(set(tokens)) != len(tokens):
        raise DataError(f"{path}: duplicate tokens in vocab")
    return Vocab(tokens=tuple(tokens), index={t: i for i, t in enumerate(tokens)})
