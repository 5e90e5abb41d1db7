"""Byte-pair-encoding tokenizer with fixed-length sequence packing.

The vocabulary reserves ids 0..2 for PAD/SOS/EOS and the following ``n_slots``
ids for learnable-prompt slot placeholders; those ids are never produced by
merges, so they cannot collide with encoded text. The base alphabet is all 256
byte values plus their end-of-word variants (suffix ``</w>``), which means any
input encodes without an unknown-token path. Merge selection is deterministic:
highest pair count first, ties broken by the lexicographically smallest pair.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError

PAD_TOKEN = "<pad>"
SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
EOW = "</w>"

_WHITESPACE = re.compile(r"\s+")


def normalize(text: str) -> str:
    return _WHITESPACE.sub(" ", text.lower()).strip()


def _word_symbols(word: str) -> tuple[str, ...]:
    raw = word.encode("utf-8")
    chars = [chr(b) for b in raw]
    chars[-1] = chars[-1] + EOW
    return tuple(chars)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    n_slots: int
    token_to_id: dict = field(init=False, repr=False, compare=False)
    merge_ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(self.tokens)})
        object.__setattr__(
            self, "merge_ranks", {pair: rank for rank, pair in enumerate(self.merges)}
        )

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def slot_ids(self) -> range:
        return range(3, 3 + self.n_slots)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def to_json(self) -> str:
        doc = {
            "tokens": list(self.tokens),
            "merges": [list(pair) for pair in self.merges],
            "n_slots": self.n_slots,
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            doc = json.loads(text)
            return cls(
                tokens=tuple(doc["tokens"]),
                merges=tuple((a, b) for a, b in doc["merges"]),
                n_slots=int(doc["n_slots"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed vocabulary document: {exc}") from exc


def slot_token(index: int) -> str:
    return f"<slot{index}>"


def _reserved_tokens(n_slots: int) -> list[str]:
    return [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN] + [slot_token(i) for i in range(n_slots)]


def build_vocab(corpus, target_size: int, n_slots: int = 8) -> Vocabulary:
    """Train BPE merges on ``corpus`` until ``target_size`` tokens exist.

    Deterministic for a fixed corpus: no randomness, ties broken
    lexicographically. Stops early once no pair occurs twice, so the result
    may be smaller than ``target_size``.
    """
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    reserved = _reserved_tokens(n_slots)
    alphabet = [chr(b) for b in range(256)] + [chr(b) + EOW for b in range(256)]
    floor = len(reserved) + len(alphabet)
    if target_size < floor:
        raise ConfigError(
            f"target_size {target_size} below alphabet+reserved minimum {floor}"
        )

    word_freq: dict[tuple[str, ...], int] = {}
    for sentence in corpus:
        for word in normalize(sentence).split():
            symbols = _word_symbols(word)
            word_freq[symbols] = word_freq.get(symbols, 0) + 1

    tokens = reserved + alphabet
    merges: list[tuple[str, str]] = []
    while len(tokens) < target_size:
        pair_counts: dict[tuple[str, str], int] = {}
        for symbols, freq in word_freq.items():
            for a, b in zip(symbols, symbols[1:]):
                pair_counts[(a, b)] = pair_counts.get((a, b), 0) + freq
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        merged = pair[0] + pair[1]
        merges.append(pair)
        tokens.append(merged)
        new_freq: dict[tuple[str, ...], int] = {}
        for symbols, freq in word_freq.items():
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            key = tuple(out)
            new_freq[key] = new_freq.get(key, 0) + freq
        word_freq = new_freq
    return Vocabulary(tokens=tuple(tokens), merges=tuple(merges), n_slots=n_slots)


def _bpe_word(symbols: tuple[str, ...], ranks: dict) -> list[str]:
    pieces = list(symbols)
    while len(pieces) > 1:
        best_rank, best_idx = None, None
        for i in range(len(pieces) - 1):
            rank = ranks.get((pieces[i], pieces[i + 1]))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank, best_idx = rank, i
        if best_idx is None:
            break
        pieces[best_idx : best_idx + 2] = [pieces[best_idx] + pieces[best_idx + 1]]
    return pieces


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id list: SOS, content, EOS, then PAD to the end."""

    ids: tuple[int, ...]
    eos_position: int

    def __len__(self) -> int:
        return len(self.ids)


def encode(sentence: str, vocab: Vocabulary, context_length: int) -> TokenSequence:
    if context_length < 3:
        raise ConfigError(f"context_length {context_length} must be >= 3")
    content: list[int] = []
    for word in normalize(sentence).split():
        for piece in _bpe_word(_word_symbols(word), vocab.merge_ranks):
            content.append(vocab.token_to_id[piece])
    content = content[: context_length - 2]
    ids = [vocab.sos_id] + content + [vocab.eos_id]
    eos_position = len(ids) - 1
    ids.extend([vocab.pad_id] * (context_length - len(ids)))
    return TokenSequence(ids=tuple(ids), eos_position=eos_position)


def decode(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    skip = {vocab.pad_id, vocab.sos_id, vocab.eos_id}
    chunks = []
    for i in ids:
        if i in skip:
            continue
        chunks.append(vocab.tokens[i])
    text = "".join(chunks).replace(EOW, " ")
    raw = bytes(ord(c) if ord(c) < 256 else ord("?") for c in text)
    return raw.decode("utf-8", errors="replace").strip()


def fits_context(sentence: str, vocab: Vocabulary, context_length: int) -> bool:
    """True when encoding loses no content tokens to truncation."""
    count = sum(
        len(_bpe_word(_word_symbols(w), vocab.merge_ranks))
        for w in normalize(sentence).split()
    )
    return count <= context_length - 2


def validate_sequence(seq: TokenSequence, vocab: Vocabulary, context_length: int) -> None:
    """Raise ParseError unless SOS/EOS/PAD placement matches the contract."""
    ids = seq.ids
    if len(ids) != context_length:
        raise ParseError(f"sequence length {len(ids)} != context {context_length}")
    if ids[0] != vocab.sos_id:
        raise ParseError("sequence does not start with SOS")
    if not (0 < seq.eos_position < context_length):
        raise ParseError(f"EOS position {seq.eos_position} out of range")
    if ids[seq.eos_position] != vocab.eos_id:
        raise ParseError("eos_position does not point at EOS")
    for i, token_id in enumerate(ids[1 : seq.eos_position], start=1):
        if token_id in (vocab.sos_id, vocab.eos_id, vocab.pad_id):
            raise ParseError(f"reserved id {token_id} inside content at {i}")
    if any(t != vocab.pad_id for t in ids[seq.eos_position + 1 :]):
        raise ParseError("non-PAD token after EOS")
