from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class Tokenizer(Protocol):
    bos_id: int
    pad_id: int
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...


class TokenizationError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    prompt_len: int

    def __post_init__(self):
        if not 0 <= self.prompt_len < len(self.ids):
            raise TokenizationError(
                f"prompt_len {self.prompt_len} leaves no target tokens in a sequence of {len(self.ids)}"
            )

    @property
    def n_target(self) -> int:
        return len(self.ids) - self.prompt_len

    @property
    def target_ids(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len :]


class WordTokenizer:
    """Whitespace/punctuation word-level tokenizer with a closed vocabulary.

    Ids 0..2 are reserved for ``<pad>``, ``<bos>`` and ``<unk>``.
    """

    specials = ("<pad>", "<bos>", "<unk>")

    def __init__(self, words: Sequence[str]):
        vocab = list(self.specials)
        seen = set(vocab)
        for w in words:
            if w not in seen:
                vocab.append(w)
                seen.add(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.bos_id, self.unk_id = 0, 1, 2

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "WordTokenizer":
        words: list[str] = []
        seen: set[str] = set()
        for t in texts:
            for w in _WORD_RE.findall(t):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        return cls(words)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in _WORD_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def to_json(self) -> dict:
        return {"kind": "word", "vocab": self.vocab[len(self.specials) :]}


class HFTokenizer:
    """Adapter over a ``transformers`` tokenizer."""

    def __init__(self, tok):
        self.tok = tok
        bos = tok.bos_token_id if tok.bos_token_id is not None else tok.eos_token_id
        if bos is None:
            raise TokenizationError("tokenizer defines neither a BOS nor an EOS token")
        self.bos_id = bos
        self.pad_id = tok.pad_token_id if tok.pad_token_id is not None else bos
        self.vocab_size = len(tok)

    def encode(self, text: str) -> list[int]:
        return list(self.tok(text, add_special_tokens=False)["input_ids"])


def tokenize(tokenizer: Tokenizer, text: str, context: str = "") -> TokenSequence:
    """Encode ``context ++ text`` and mark where the scored region begins.

    A BOS token is always prepended, so ``prompt_len`` is 1 for an empty
    context. When the joint encoding does not start with the encoding of the
    context alone (subword merges across the boundary) the two parts are
    encoded separately and concatenated.
    """
    if not text.strip():
        raise TokenizationError("text must be non-empty")
    prefix = [tokenizer.bos_id] + (tokenizer.encode(context) if context else [])
    joint = [tokenizer.bos_id] + tokenizer.encode(f"{context} {text}" if context else text)
    if joint[: len(prefix)] == prefix and len(joint) > len(prefix):
        ids = joint
    else:
        ids = prefix + tokenizer.encode(f" {text}" if context else text)
    if len(ids) == len(prefix):
        raise TokenizationError(f"text {text!r} produced no target tokens")
    return TokenSequence(tuple(ids), len(prefix))
