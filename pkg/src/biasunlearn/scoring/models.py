"""Causal LM backends: a table-driven stub, a tiny transformer, and a transformers wrapper.

Every backend exposes ``logits(ids, attention_mask)`` and carries its own
tokenizer; adapters are attached with :meth:`CausalLM.attach_adapter`.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .lora import base_parameters, inject_lora, lora_modules, remove_lora
from .tokenize import HFTokenizer, WordTokenizer


class CausalLM(nn.Module):
    backend = "abstract"
    default_lora_targets: tuple[str, ...] = ()

    def __init__(self, base_id: str, tokenizer, max_len: int):
        super().__init__()
        self.base_id = base_id
        self.tokenizer = tokenizer
        self.max_len = max_len

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    @property
    def trainable(self) -> bool:
        return bool(lora_modules(self))

    def logits(self, ids: torch.Tensor, attention_mask: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    def attach_adapter(
        self,
        rank: int = 8,
        alpha: float = 16.0,
        targets: Sequence[str] | None = None,
        seed: int = 0,
    ) -> list[str]:
        """Attach fresh adapters (B = 0) and freeze everything else."""
        remove_lora(self)
        for p in self.parameters():
            p.requires_grad_(False)
        gen = torch.Generator().manual_seed(seed)
        return inject_lora(self, targets or self.default_lora_targets, rank, alpha, gen)

    def detach_adapter(self) -> None:
        remove_lora(self)

    def base_state(self) -> dict[str, torch.Tensor]:
        """Base parameters keyed by their names in an adapter-free model."""
        wrapped = tuple(f"{n}.base." for n in lora_modules(self))
        out = {}
        for name, p in base_parameters(self):
            for w in wrapped:
                if name.startswith(w):
                    name = w[: -len("base.")] + name[len(w) :]
                    break
            out[name] = p
        return out

    def spec(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# table stub


class TableLM(CausalLM):
    """Bigram stub: row ``prev`` of the table holds the next-token logits.

    The table lives in the weight of a bias-free ``head`` layer fed one-hot
    previous tokens, so an adapter on ``head`` perturbs the table by
    ``scaling * (B A)^T``.
    """

    backend = "stub"
    default_lora_targets = ("head",)

    def __init__(self, tokenizer, table: torch.Tensor | None = None, base_id: str = "stub", max_len: int = 512,
                 dtype: torch.dtype = torch.float32):
        super().__init__(base_id, tokenizer, max_len)
        V = tokenizer.vocab_size
        self.head = nn.Linear(V, V, bias=False, dtype=dtype)
        with torch.no_grad():
            if table is None:
                self.head.weight.zero_()
            else:
                if tuple(table.shape) != (V, V):
                    raise ValueError(f"table must be {V}x{V}, got {tuple(table.shape)}")
                self.head.weight.copy_(torch.as_tensor(table, dtype=dtype).T)
        self.head.weight.requires_grad_(False)

    @classmethod
    def from_probabilities(cls, tokenizer, probs, **kw) -> "TableLM":
        """Build from a row-stochastic table P[prev, next]; zeros become -1e4 logits."""
        p = torch.as_tensor(probs, dtype=torch.float64)
        logits = torch.where(p > 0, p.clamp_min(1e-300).log(), torch.full_like(p, -1e4))
        return cls(tokenizer, logits, **kw)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    @property
    def table(self) -> torch.Tensor:
        mod = self.head.base if hasattr(self.head, "base") else self.head
        return mod.weight.T

    def logits(self, ids, attention_mask=None):
        onehot = F.one_hot(ids, self.vocab_size).to(self.table.dtype)
        return self.head(onehot)

    def spec(self) -> dict:
        return {"backend": self.backend, "base_id": self.base_id, "max_len": self.max_len}


# ---------------------------------------------------------------------------
# tiny transformer


@dataclass
class TinyConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32


class _Attention(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.o = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x, key_mask):
        B, T, D = x.shape
        h = self.n_heads

        def split(t):
            return t.view(B, T, h, D // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        mask = causal[None, None] & key_mask[:, None, None, :]
        att = att.masked_fill(~mask, float("-inf")).softmax(-1)
        att = torch.nan_to_num(att)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.o(y)


class _Block(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = _Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model))

    def forward(self, x, key_mask):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


class TinyTransformerLM(CausalLM):
    backend = "tiny"
    default_lora_targets = ("attn.q", "attn.v")

    def __init__(self, tokenizer, cfg: TinyConfig | None = None, base_id: str = "tiny", seed: int = 0):
        cfg = cfg or TinyConfig(vocab_size=tokenizer.vocab_size)
        if cfg.vocab_size != tokenizer.vocab_size:
            raise ValueError("config vocab_size disagrees with tokenizer")
        super().__init__(base_id, tokenizer, cfg.max_len)
        self.cfg = cfg
        torch.manual_seed(seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.05)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def logits(self, ids, attention_mask=None):
        if attention_mask is None:
            attention_mask = torch.ones_like(ids, dtype=torch.bool)
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for blk in self.blocks:
            x = blk(x, attention_mask.bool())
        return self.lm_head(self.ln_f(x))

    def spec(self) -> dict:
        return {"backend": self.backend, "base_id": self.base_id, "config": asdict(self.cfg)}


# ---------------------------------------------------------------------------
# transformers


class HFCausalLM(CausalLM):
    backend = "hf"
    default_lora_targets = ("c_attn", "q_proj", "v_proj")

    def __init__(self, model, tokenizer, base_id: str, name_or_path: str | None = None):
        max_len = getattr(model.config, "n_positions", None) or getattr(model.config, "max_position_embeddings", 1024)
        super().__init__(base_id, tokenizer, max_len)
        self.model = model
        self.name_or_path = name_or_path or base_id
        for p in self.model.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_pretrained(cls, name_or_path: str, base_id: str | None = None) -> "HFCausalLM":
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(name_or_path)
        model = AutoModelForCausalLM.from_pretrained(name_or_path, torch_dtype=torch.float32)
        return cls(model, HFTokenizer(tok), base_id or name_or_path, name_or_path)

    @property
    def vocab_size(self) -> int:
        return self.model.get_output_embeddings().weight.shape[0]

    def logits(self, ids, attention_mask=None):
        return self.model(input_ids=ids, attention_mask=attention_mask).logits

    def spec(self) -> dict:
        return {"backend": self.backend, "base_id": self.base_id, "name_or_path": self.name_or_path}


# ---------------------------------------------------------------------------
# persistence


def save_model(model: CausalLM, directory: str | Path) -> Path:
    """Persist the base model (never the adapter) so it can be rebuilt with :func:`load_model`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = model.spec()
    if isinstance(model.tokenizer, WordTokenizer):
        spec["tokenizer"] = model.tokenizer.to_json()
    if model.backend != "hf":
        state = {k: v.detach().clone() for k, v in model.base_state().items()}
        torch.save(state, directory / "weights.pt")
        spec["dtype"] = str(next(iter(state.values())).dtype).replace("torch.", "")
    (directory / "model.json").write_text(json.dumps(spec, indent=2))
    return directory


def load_model(directory: str | Path) -> CausalLM:
    directory = Path(directory)
    manifest = directory / "model.json"
    if not manifest.exists():
        raise FileNotFoundError(f"model path not found: {directory}")
    spec = json.loads(manifest.read_text())
    backend = spec.get("backend")
    if backend == "hf":
        return HFCausalLM.from_pretrained(spec["name_or_path"], spec.get("base_id"))
    tok = WordTokenizer(spec["tokenizer"]["vocab"])
    state = torch.load(directory / "weights.pt", weights_only=True)
    if backend == "stub":
        dtype = getattr(torch, spec.get("dtype", "float32"))
        model = TableLM(tok, base_id=spec["base_id"], max_len=spec.get("max_len", 512), dtype=dtype)
    elif backend == "tiny":
        model = TinyTransformerLM(tok, TinyConfig(**spec["config"]), base_id=spec["base_id"])
    else:
        raise ValueError(f"unknown backend {backend!r}")
    model.load_state_dict(state)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def perturbed_sibling(model: CausalLM, scale: float = 0.05, seed: int = 0, base_id: str | None = None) -> CausalLM:
    """Adapter-free copy whose base weights carry relative Gaussian noise.

    Stands in for a fine-tuned variant that shares the donor's architecture.
    """
    sib = copy.deepcopy(model)
    sib.detach_adapter()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in base_parameters(sib):
            std = p.float().std() if p.numel() > 1 else p.abs().float()
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            p.add_(noise * (scale * std).to(p.dtype))
    sib.base_id = base_id or f"{model.base_id}-sibling"
    return sib
