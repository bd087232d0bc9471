"""Causal-LM scoring with adapter on (policy) or off (reference), plus adapter transfer."""

from .checkpoint import (
    AdapterCheckpoint,
    AdapterError,
    AdapterShapeError,
    BaseMismatchError,
    CheckpointCorruptError,
    export_adapter,
    import_adapter,
    load_adapter,
    save_adapter,
)
from .lora import LoRALinear, adapter_disabled, adapter_parameters, lora_modules
from .models import (
    CausalLM,
    HFCausalLM,
    TableLM,
    TinyConfig,
    TinyTransformerLM,
    load_model,
    perturbed_sibling,
    save_model,
)
from .score import (
    ContextWindowError,
    SequenceScore,
    next_token_distributions,
    next_token_distributions_batch,
    score_batch,
    sequence_logprob,
)
from .tokenize import HFTokenizer, TokenizationError, TokenSequence, WordTokenizer, tokenize

__all__ = [
    "AdapterCheckpoint",
    "AdapterError",
    "AdapterShapeError",
    "BaseMismatchError",
    "CausalLM",
    "CheckpointCorruptError",
    "ContextWindowError",
    "HFCausalLM",
    "HFTokenizer",
    "LoRALinear",
    "SequenceScore",
    "TableLM",
    "TinyConfig",
    "TinyTransformerLM",
    "TokenSequence",
    "TokenizationError",
    "WordTokenizer",
    "adapter_disabled",
    "adapter_parameters",
    "export_adapter",
    "import_adapter",
    "load_adapter",
    "load_model",
    "lora_modules",
    "next_token_distributions",
    "next_token_distributions_batch",
    "perturbed_sibling",
    "save_adapter",
    "save_model",
    "score_batch",
    "sequence_logprob",
    "tokenize",
]
