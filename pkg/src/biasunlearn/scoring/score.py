from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Sequence

import torch

from .lora import adapter_disabled
from .models import CausalLM
from .tokenize import TokenSequence


class ContextWindowError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceScore:
    """Natural-log probabilities of the target tokens of one sequence."""

    token_logprobs: torch.Tensor

    @property
    def sum(self) -> torch.Tensor:
        return self.token_logprobs.sum()

    @property
    def mean(self) -> torch.Tensor:
        return self.token_logprobs.mean()

    @property
    def count(self) -> int:
        return self.token_logprobs.numel()


def _check(model: CausalLM, seqs: Sequence[TokenSequence]) -> None:
    for s in seqs:
        if len(s.ids) > model.max_len:
            raise ContextWindowError(f"sequence of {len(s.ids)} tokens exceeds context window {model.max_len}")
        if max(s.ids) >= model.vocab_size:
            raise ValueError(f"token id {max(s.ids)} outside vocabulary of {model.vocab_size}")


def _log_softmax(model: CausalLM, seqs: Sequence[TokenSequence], use_adapter: bool, grad: bool):
    _check(model, seqs)
    T = max(len(s.ids) for s in seqs)
    pad = model.tokenizer.pad_id
    ids = torch.full((len(seqs), T), pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), T), dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s.ids)] = torch.tensor(s.ids)
        mask[i, : len(s.ids)] = 1
    disable = contextlib.nullcontext() if use_adapter else adapter_disabled(model)
    # the reference pass never builds a graph
    grad_ctx = torch.enable_grad() if (grad and use_adapter) else torch.no_grad()
    with disable, grad_ctx:
        logp = model.logits(ids, mask).log_softmax(-1)
    return ids, logp


def score_batch(
    model: CausalLM, seqs: Sequence[TokenSequence], use_adapter: bool = True, grad: bool = False
) -> list[SequenceScore]:
    ids, logp = _log_softmax(model, seqs, use_adapter, grad)
    # position t-1 predicts token t
    token_lp = logp[:, :-1].gather(-1, ids[:, 1:, None]).squeeze(-1)
    return [SequenceScore(token_lp[i, s.prompt_len - 1 : len(s.ids) - 1]) for i, s in enumerate(seqs)]


def sequence_logprob(
    model: CausalLM, seq: TokenSequence, use_adapter: bool = True, grad: bool = False
) -> SequenceScore:
    return score_batch(model, [seq], use_adapter, grad)[0]


def next_token_distributions_batch(
    model: CausalLM, seqs: Sequence[TokenSequence], use_adapter: bool = True, grad: bool = False
) -> list[torch.Tensor]:
    """Per sequence, a ``[n_target, vocab]`` tensor of next-token log-probabilities."""
    _, logp = _log_softmax(model, seqs, use_adapter, grad)
    return [logp[i, s.prompt_len - 1 : len(s.ids) - 1] for i, s in enumerate(seqs)]


def next_token_distributions(
    model: CausalLM, seq: TokenSequence, use_adapter: bool = True, grad: bool = False
) -> torch.Tensor:
    return next_token_distributions_batch(model, [seq], use_adapter, grad)[0]
