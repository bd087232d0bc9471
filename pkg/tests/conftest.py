import json

import pytest
import torch

from biasunlearn.corpus import StereoInstance
from biasunlearn.scoring import TableLM, WordTokenizer

torch.set_num_threads(1)


def make_instances(n_per_type: dict[str, int]) -> list[StereoInstance]:
    out = []
    for t, n in n_per_type.items():
        for i in range(n):
            out.append(
                StereoInstance(
                    id=f"{t}-{i}",
                    bias_type=t,
                    context=f"ctx {t} {i}",
                    stereotype=f"stereo {t} {i}",
                    anti_stereotype=f"anti {t} {i}",
                    unrelated=f"unrel {t} {i}",
                )
            )
    return out


@pytest.fixture
def write_jsonl(tmp_path):
    def _write(name, records):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
        return path

    return _write


@pytest.fixture
def small_vocab():
    return WordTokenizer(["a", "b", "c", "d"])


@pytest.fixture
def random_table_lm():
    """Float64 bigram stub with random base table and a random (non-zero) adapter."""

    def _make(seed=0, rank=2, dtype=torch.float64):
        gen = torch.Generator().manual_seed(seed)
        tok = WordTokenizer([f"w{i}" for i in range(5)])
        V = tok.vocab_size
        table = torch.randn(V, V, generator=gen, dtype=dtype)
        model = TableLM(tok, table, dtype=dtype)
        model.attach_adapter(rank=rank, alpha=2.0 * rank, seed=seed)
        with torch.no_grad():
            mod = model.head
            mod.lora_A.copy_(0.5 * torch.randn(mod.lora_A.shape, generator=gen, dtype=dtype))
            mod.lora_B.copy_(0.5 * torch.randn(mod.lora_B.shape, generator=gen, dtype=dtype))
        return model

    return _make


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
