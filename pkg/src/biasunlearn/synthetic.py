"""Synthetic StereoSet-style corpus with an injected association skew, and a tiny LM pretrained on it.

Each bias type has two classes of group words and a list of attribute
pairs (one attribute per class). After a context naming a group, the
pretraining text continues with the group's own-class attribute with
probability ``sigmoid(a_group + b_pair)``, and with the other class's
attribute otherwise. The spread in skew across groups and pairs means
debiasing moves SS down gradually rather than all at once. Neutral words
follow every context too, so probability taken from attributes has
somewhere to go besides the unrelated (junk) candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import ContrastPair, StereoInstance, join_context, write_crows_pairs, write_stereoset
from .scoring import TinyConfig, TinyTransformerLM, WordTokenizer, save_model

TEMPLATES = ("the {} is", "my {} seems", "that {} was", "every {} looks")


@dataclass
class SyntheticSpec:
    bias_types: tuple[str, ...] = ("gender", "profession", "race", "religion")
    groups_per_class: int = 5
    n_pairs: int = 10
    templates: tuple[str, ...] = TEMPLATES
    n_junk: int = 24
    n_neutral: int = 16
    attribute_mass: float = 0.5
    filler_rate: float = 0.1
    group_skew: tuple[float, float] = (0.2, 1.4)
    pair_skew: tuple[float, float] = (-0.4, 1.0)
    seed: int = 0


@dataclass
class SyntheticData:
    train: list[StereoInstance]
    dev: list[StereoInstance]
    test: list[StereoInstance]
    pretrain_texts: list[str]
    tokenizer: WordTokenizer
    skew: dict[tuple[str, str], float]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def make_synthetic(spec: SyntheticSpec | None = None, n_pretrain: int = 40000) -> SyntheticData:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    junk = [f"zz{i}" for i in range(spec.n_junk)]
    neutral = [f"nn{i}" for i in range(spec.n_neutral)]
    instances: dict[str, list[StereoInstance]] = {}
    # per context: list of (attribute, probability)
    continuations: dict[str, list[tuple[str, float]]] = {}
    skew: dict[tuple[str, str], float] = {}
    words: list[str] = []
    for t in spec.bias_types:
        groups = {c: [f"{t[:3]}{c}{i}" for i in range(spec.groups_per_class)] for c in "xy"}
        pairs = [(f"{t[:3]}ax{j}", f"{t[:3]}ay{j}") for j in range(spec.n_pairs)]
        a = {g: rng.uniform(*spec.group_skew) for g in groups["x"] + groups["y"]}
        b = [rng.uniform(*spec.pair_skew) for _ in pairs]
        rows = []
        for cls in "xy":
            for g in groups[cls]:
                for j, (ax, ay) in enumerate(pairs):
                    p_own = float(_sigmoid(a[g] + b[j]))
                    own, other = (ax, ay) if cls == "x" else (ay, ax)
                    skew[(g, own)] = p_own
                    for k, tpl in enumerate(spec.templates):
                        ctx = tpl.format(g)
                        continuations.setdefault(ctx, []).extend(
                            [
                                (own, spec.attribute_mass * p_own / len(pairs)),
                                (other, spec.attribute_mass * (1 - p_own) / len(pairs)),
                            ]
                        )
                        rows.append(
                            StereoInstance(
                                id=f"{g}-{j}-{k}",
                                bias_type=t,
                                context=ctx,
                                stereotype=f"{own} .",
                                anti_stereotype=f"{other} .",
                                unrelated=f"{junk[rng.integers(len(junk))]} .",
                            )
                        )
        instances[t] = rows
        words += groups["x"] + groups["y"] + [w for p in pairs for w in p]

    # stratified: every (group, pair) sends one template to dev, one to test, the rest to train
    train, dev, test = [], [], []
    n_tpl = len(spec.templates)
    for t in spec.bias_types:
        rows = instances[t]
        for start in range(0, len(rows), n_tpl):
            combo = rows[start : start + n_tpl]
            order = rng.permutation(n_tpl)
            dev.append(combo[order[0]])
            test.append(combo[order[1]])
            train.extend(combo[i] for i in sorted(order[2:]))

    contexts = sorted(continuations)
    texts = []
    for _ in range(n_pretrain):
        if rng.random() < spec.filler_rate:
            # filler so junk words have a learned distribution of their own
            ctx = contexts[rng.integers(len(contexts))]
            texts.append(f"{ctx} {junk[rng.integers(len(junk))]} {junk[rng.integers(len(junk))]} .")
            continue
        ctx = contexts[rng.integers(len(contexts))]
        if rng.random() < 1.0 - spec.attribute_mass:
            texts.append(f"{ctx} {neutral[rng.integers(len(neutral))]} .")
            continue
        options = continuations[ctx]
        probs = np.array([p for _, p in options])
        choice = options[rng.choice(len(options), p=probs / probs.sum())][0]
        texts.append(f"{ctx} {choice} .")

    frame_words = sorted({w for tpl in spec.templates for w in tpl.replace("{}", "").split()})
    tokenizer = WordTokenizer(frame_words + words + neutral + junk + ["."])
    return SyntheticData(train, dev, test, texts, tokenizer, skew)


def pretrain_tiny_lm(
    data: SyntheticData,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 3e-3,
    seed: int = 0,
    cfg: TinyConfig | None = None,
    base_id: str = "tiny-synthetic",
) -> TinyTransformerLM:
    tok = data.tokenizer
    cfg = cfg or TinyConfig(vocab_size=tok.vocab_size, max_len=16)
    model = TinyTransformerLM(tok, cfg, base_id=base_id, seed=seed)
    encoded = [[tok.bos_id] + tok.encode(t) for t in data.pretrain_texts]
    T = max(len(e) for e in encoded)
    ids = torch.full((len(encoded), T), tok.pad_id, dtype=torch.long)
    for i, e in enumerate(encoded):
        ids[i, : len(e)] = torch.tensor(e)
    mask = ids != tok.pad_id
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0 - s / steps)
    model.train()
    for _ in range(steps):
        idx = torch.randint(len(encoded), (batch_size,), generator=gen)
        x, m = ids[idx], mask[idx]
        logits = model.logits(x, m)
        targets = x[:, 1:].masked_fill(~m[:, 1:], -100)
        loss = torch.nn.functional.cross_entropy(logits[:, :-1].reshape(-1, cfg.vocab_size), targets.reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def crows_pairs_from(instances: list[StereoInstance]) -> list[ContrastPair]:
    return [
        ContrastPair(
            i.id,
            i.bias_type,
            join_context(i.context, i.stereotype),
            join_context(i.context, i.anti_stereotype),
        )
        for i in instances
    ]


def write_synthetic(directory: str | Path, data: SyntheticData, model: TinyTransformerLM | None = None) -> dict:
    """Write splits, a CrowS-style file and (optionally) the pretrained model; return the paths."""
    directory = Path(directory)
    (directory / "data").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "dev", "test"):
        paths[split] = directory / "data" / f"{split}.jsonl"
        write_stereoset(paths[split], getattr(data, split))
    paths["crows"] = directory / "data" / "crows.jsonl"
    write_crows_pairs(paths["crows"], crows_pairs_from(data.test))
    if model is not None:
        paths["model"] = save_model(model, directory / "model")
    (directory / "skew.json").write_text(json.dumps({f"{g}|{a}": p for (g, a), p in data.skew.items()}, indent=1))
    return paths

