"""Bias datasets, forget/retain partitions and the chunk stream that feeds training."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STEREOSET_TYPES = frozenset({"gender", "profession", "race", "religion"})
CROWS_PAIRS_TYPES = frozenset(
    {
        "race",
        "socioeconomic",
        "gender",
        "disability",
        "nationality",
        "sexual-orientation",
        "physical-appearance",
        "religion",
        "age",
    }
)

# Instance counts of the re-split StereoSet data (train = official test, test = official dev).
RESPLIT_COUNTS = {
    "train": {"gender": 1471, "profession": 4782, "race": 5871, "religion": 438},
    "dev": {"gender": 50, "profession": 50, "race": 50, "religion": 50},
    "test": {"gender": 497, "profession": 1638, "race": 1938, "religion": 159},
}

STEREOTYPE = "stereotype"
ANTI_STEREOTYPE = "anti_stereotype"


class CorpusError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


class SchemaError(CorpusError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class StereoInstance:
    id: str
    bias_type: str
    context: str
    stereotype: str
    anti_stereotype: str
    unrelated: str

    def text(self, role: str) -> str:
        return self.stereotype if role == STEREOTYPE else self.anti_stereotype


@dataclass(frozen=True)
class ContrastPair:
    id: str
    bias_type: str
    more_stereotypical: str
    less_stereotypical: str


def join_context(context: str, text: str) -> str:
    return f"{context} {text}" if context else text


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: malformed record (expected an object)")
            yield lineno, record


def _field(record: dict, key: str, path: Path, lineno: int, allow_empty: bool = False) -> str:
    if key not in record:
        raise CorpusError(f"{path}:{lineno}: malformed record (missing key {key!r})")
    value = record[key]
    if not isinstance(value, str):
        raise CorpusError(f"{path}:{lineno}: malformed record ({key!r} must be a string)")
    if not allow_empty and not value.strip():
        raise CorpusError(f"{path}:{lineno}: malformed record ({key!r} is empty)")
    return value


def _resolve_split_file(path: str | Path, split: str) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset path not found: {path}")
    return path


def load_stereoset(
    path: str | Path,
    split: str = "train",
    bias_types: frozenset[str] = STEREOSET_TYPES,
) -> list[StereoInstance]:
    """Load one split of StereoSet-format JSON lines.

    ``path`` is either a JSON-lines file or a directory holding ``<split>.jsonl``.
    Contexts and candidates are kept apart; candidates are scored conditioned
    on the context.
    """
    if split not in ("train", "dev", "test"):
        raise ValueError(f"unknown split {split!r}")
    path = _resolve_split_file(path, split)
    instances: list[StereoInstance] = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        inst_id = _field(rec, "id", path, lineno)
        bias_type = _field(rec, "bias_type", path, lineno)
        if bias_type not in bias_types:
            raise SchemaError(f"{path}:{lineno}: unknown bias_type {bias_type!r}")
        if inst_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate id {inst_id!r}")
        seen.add(inst_id)
        inst = StereoInstance(
            id=inst_id,
            bias_type=bias_type,
            context=_field(rec, "context", path, lineno, allow_empty=True),
            stereotype=_field(rec, "stereotype", path, lineno),
            anti_stereotype=_field(rec, "anti_stereotype", path, lineno),
            unrelated=_field(rec, "unrelated", path, lineno),
        )
        if inst.stereotype == inst.anti_stereotype:
            raise CorpusError(f"{path}:{lineno}: stereotype and anti_stereotype are identical")
        instances.append(inst)
    return instances


def load_crows_pairs(
    path: str | Path, bias_types: frozenset[str] = CROWS_PAIRS_TYPES
) -> list[ContrastPair]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path not found: {path}")
    pairs: list[ContrastPair] = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        pair_id = _field(rec, "id", path, lineno)
        bias_type = _field(rec, "bias_type", path, lineno)
        if bias_type not in bias_types:
            raise SchemaError(f"{path}:{lineno}: unknown bias_type {bias_type!r}")
        if pair_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate id {pair_id!r}")
        seen.add(pair_id)
        more = _field(rec, "sent_more", path, lineno)
        less = _field(rec, "sent_less", path, lineno)
        if more == less:
            raise CorpusError(f"{path}:{lineno}: degenerate pair (identical sentences)")
        pairs.append(ContrastPair(pair_id, bias_type, more, less))
    return pairs


def count_by_type(items: Sequence[StereoInstance] | Sequence[ContrastPair]) -> dict[str, int]:
    return dict(Counter(item.bias_type for item in items))


def write_stereoset(path: str | Path, instances: Sequence[StereoInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.__dict__, ensure_ascii=False) + "\n")


def write_crows_pairs(path: str | Path, pairs: Sequence[ContrastPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {
                "id": p.id,
                "bias_type": p.bias_type,
                "sent_more": p.more_stereotypical,
                "sent_less": p.less_stereotypical,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# partitions


@dataclass
class PartitionState:
    swapped: dict[str, bool] = field(default_factory=dict)
    swap_log: list[tuple[int, str, bool]] = field(default_factory=list)

    def is_swapped(self, bias_type: str) -> bool:
        return self.swapped.get(bias_type, False)

    def to_json(self) -> dict:
        return {"swapped": dict(sorted(self.swapped.items())), "swap_log": [list(e) for e in self.swap_log]}

    @classmethod
    def from_json(cls, data: dict) -> "PartitionState":
        return cls(
            swapped={k: bool(v) for k, v in data.get("swapped", {}).items()},
            swap_log=[(int(s), str(t), bool(f)) for s, t, f in data.get("swap_log", [])],
        )


def apply_swap(state: PartitionState, bias_type: str, step: int) -> PartitionState:
    """Return a new state with ``bias_type``'s forget/retain roles exchanged."""
    if state.swap_log and step < state.swap_log[-1][0]:
        raise ValueError(f"swap step {step} precedes last logged step {state.swap_log[-1][0]}")
    new_flag = not state.is_swapped(bias_type)
    swapped = dict(state.swapped)
    swapped[bias_type] = new_flag
    return PartitionState(swapped=swapped, swap_log=[*state.swap_log, (step, bias_type, new_flag)])


@dataclass(frozen=True)
class PoolItem:
    instance_id: str
    bias_type: str
    context: str
    text: str
    role: str
    adversarial: bool = False

    @property
    def full_text(self) -> str:
        return join_context(self.context, self.text)


@dataclass(frozen=True)
class ForgetPool:
    """Forget-side items, each paired with the opposite-role text of its instance.

    ``counterparts[i]`` is the adversarial candidate for ``items[i]``; chunk
    assembly swaps a fixed share of every forget batch for these.
    """

    items: tuple[PoolItem, ...]
    counterparts: tuple[PoolItem, ...]
    adversarial_fraction: float = 0.0

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, idx):
        return self.items[idx]


def build_partitions(
    instances: Sequence[StereoInstance],
    state: PartitionState,
    adversarial_fraction: float = 0.25,
) -> tuple[ForgetPool, tuple[PoolItem, ...], tuple[str, ...]]:
    if not instances:
        raise ValueError("instances must be non-empty")
    if not 0.0 <= adversarial_fraction < 0.5:
        raise ConfigurationError("adversarial_fraction must lie in [0, 0.5)")
    forget, counterparts, retain, unrelated = [], [], [], []
    for inst in instances:
        if state.is_swapped(inst.bias_type):
            forget_role, retain_role = ANTI_STEREOTYPE, STEREOTYPE
        else:
            forget_role, retain_role = STEREOTYPE, ANTI_STEREOTYPE
        forget.append(PoolItem(inst.id, inst.bias_type, inst.context, inst.text(forget_role), forget_role))
        counterparts.append(
            PoolItem(inst.id, inst.bias_type, inst.context, inst.text(retain_role), retain_role, adversarial=True)
        )
        retain.append(PoolItem(inst.id, inst.bias_type, inst.context, inst.text(retain_role), retain_role))
        unrelated.append(join_context(inst.context, inst.unrelated))
    pool = ForgetPool(tuple(forget), tuple(counterparts), adversarial_fraction)
    return pool, tuple(retain), tuple(unrelated)


# ---------------------------------------------------------------------------
# chunks


@dataclass(frozen=True)
class DataChunk:
    forget_batch: tuple[PoolItem, ...]
    retain_batch: tuple[PoolItem, ...]
    unrelated_batch: tuple[str, ...]
    chunk_index: int


def adversarial_count(forget_batch_size: int, fraction: float) -> int:
    return math.floor(fraction * forget_batch_size + 1e-9)


def chunk_stream(
    forget_pool: ForgetPool,
    retain_pool: Sequence[PoolItem],
    unrelated_pool: Sequence[str],
    forget_batch_size: int,
    retain_batch_size: int,
    unrelated_batch_size: int,
    seed: int | Sequence[int],
) -> Iterator[DataChunk]:
    """Yield an endless, seed-determined stream of data chunks.

    The forget pool is reshuffled every epoch and consumed without
    replacement (an incomplete tail is dropped). The retain and unrelated
    pools are shuffled once and then read cyclically, so they never run out.
    Each forget batch holds ``floor(fraction * B_f)`` adversarial members:
    the opposite-role text of instances already present in the same batch.
    """
    if forget_batch_size < 1:
        raise ConfigurationError("forget batch size must be >= 1")
    if retain_batch_size % forget_batch_size or retain_batch_size // forget_batch_size < 2:
        raise ConfigurationError(
            f"retain batch size {retain_batch_size} must be n * {forget_batch_size} with n > 1"
        )
    if unrelated_batch_size < 1:
        raise ConfigurationError("unrelated batch size must be >= 1")
    if not len(forget_pool) or not retain_pool or not unrelated_pool:
        raise ValueError("pools must be non-empty")
    n_adv = adversarial_count(forget_batch_size, forget_pool.adversarial_fraction)
    n_plain = forget_batch_size - n_adv
    if len(forget_pool) < n_plain:
        raise ConfigurationError(
            f"forget pool of {len(forget_pool)} cannot fill a batch of {n_plain} plain members"
        )

    rng = np.random.default_rng(seed)
    retain_order = rng.permutation(len(retain_pool))
    unrelated_order = rng.permutation(len(unrelated_pool))
    retain_ptr = 0
    unrelated_ptr = 0
    chunk_index = 0
    while True:
        epoch = rng.permutation(len(forget_pool))
        for start in range(0, len(epoch) - n_plain + 1, n_plain):
            picked = epoch[start : start + n_plain]
            batch = [forget_pool.items[i] for i in picked]
            if n_adv:
                mirrored = rng.choice(n_plain, size=n_adv, replace=False)
                batch.extend(forget_pool.counterparts[picked[j]] for j in sorted(mirrored))
            retain_idx = [retain_order[(retain_ptr + k) % len(retain_pool)] for k in range(retain_batch_size)]
            retain_ptr = (retain_ptr + retain_batch_size) % len(retain_pool)
            unrel_idx = [
                unrelated_order[(unrelated_ptr + k) % len(unrelated_pool)] for k in range(unrelated_batch_size)
            ]
            unrelated_ptr = (unrelated_ptr + unrelated_batch_size) % len(unrelated_pool)
            yield DataChunk(
                forget_batch=tuple(batch),
                retain_batch=tuple(retain_pool[i] for i in retain_idx),
                unrelated_batch=tuple(unrelated_pool[i] for i in unrel_idx),
                chunk_index=chunk_index,
            )
            chunk_index += 1
