"""Unlearning loop: chunk consumption, adapter updates, dev probes, swapping and early stop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch

from .bias_eval import EvalReport, PreferenceRule, stereoset_eval
from .corpus import (
    ConfigurationError,
    DataChunk,
    PartitionState,
    StereoInstance,
    apply_swap,
    build_partitions,
    chunk_stream,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    kl_unrelated_loss,
    npo_forget_loss,
    retention_loss,
    total_loss,
    weighted_sum,
)
from .scoring import (
    CausalLM,
    adapter_parameters,
    export_adapter,
    import_adapter,
    load_adapter,
    next_token_distributions_batch,
    save_adapter,
    score_batch,
    tokenize,
)
from .scoring.checkpoint import CheckpointCorruptError

logger = logging.getLogger(__name__)

Probe = Callable[[CausalLM, Sequence[StereoInstance], int], EvalReport]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    forget_batch: int = 4
    retain_batch: int = 28
    unrelated_batch: int | None = None  # defaults to forget_batch
    learning_rate: float = 5e-5
    schedule: str = "linear"
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0
    probe_every: int = 50
    early_stop_band: float = 2.0
    adversarial_fraction: float = 0.25
    max_steps: int = 500
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] | None = None
    tie_credit: float = 0.5

    def __post_init__(self):
        if self.unrelated_batch is None:
            self.unrelated_batch = self.forget_batch
        if self.forget_batch < 1:
            raise ConfigurationError("forget_batch must be >= 1")
        if self.retain_batch % self.forget_batch or self.retain_batch // self.forget_batch < 2:
            raise ConfigurationError("retain_batch must be n * forget_batch with n > 1")
        if self.probe_every < 1:
            raise ConfigurationError("probe_every must be >= 1")
        if self.early_stop_band <= 0:
            raise ConfigurationError("early_stop_band must be positive")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if self.schedule != "linear":
            raise ConfigurationError(f"unsupported schedule {self.schedule!r}")
        if self.optimizer != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets) if self.lora_targets else None
        return d


@dataclass
class TrainState:
    step: int = 0
    partition_state: PartitionState = field(default_factory=PartitionState)
    last_probe: EvalReport | None = None
    stopped: bool = False
    stop_reason: str | None = None
    # stream bookkeeping: how many times the pools were rebuilt, chunks drawn since
    rebuilds: int = 0
    chunks_consumed: int = 0

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "partition_state": self.partition_state.to_json(),
            "last_probe": self.last_probe.to_json() if self.last_probe else None,
            "stopped": self.stopped,
            "stop_reason": self.stop_reason,
            "rebuilds": self.rebuilds,
            "chunks_consumed": self.chunks_consumed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainState":
        return cls(
            step=int(d["step"]),
            partition_state=PartitionState.from_json(d["partition_state"]),
            last_probe=EvalReport.from_json(d["last_probe"]) if d.get("last_probe") else None,
            stopped=bool(d["stopped"]),
            stop_reason=d.get("stop_reason"),
            rebuilds=int(d.get("rebuilds", 0)),
            chunks_consumed=int(d.get("chunks_consumed", 0)),
        )


def polarity_ss(ss: float, swapped: bool) -> float:
    """SS seen from the side currently being forgotten."""
    return 100.0 - ss if swapped else ss


def maybe_swap(report: EvalReport, state: PartitionState, step: int) -> PartitionState:
    """Toggle every bias type that crossed 50 in its current polarity.

    Unswapped types flip when SS < 50; swapped types flip back when SS > 50,
    so the forget side is always the one the model currently over-prefers.
    """
    for bias_type, scores in sorted(report.per_type.items()):
        if polarity_ss(scores.ss, state.is_swapped(bias_type)) < 50.0:
            state = apply_swap(state, bias_type, step)
    return state


def should_stop(report: EvalReport, band: float = 2.0) -> bool:
    return bool(report.per_type) and all(abs(s.ss - 50.0) < band for s in report.per_type.values())


def swap_log_digest(state: PartitionState) -> str:
    payload = json.dumps([list(e) for e in state.swap_log]).encode()
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    model: CausalLM,
    state: TrainState,
    directory: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
    scheduler=None,
    config: TrainingConfig | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "training_step": state.step,
        "swap_log_digest": swap_log_digest(state.partition_state),
        "loss_weights": asdict(config.weights) if config else None,
        "seed": config.seed if config else None,
        "lineage": [model.base_id],
    }
    save_adapter(export_adapter(model, meta), directory / "adapter")
    if optimizer is not None:
        # the adapter blobs are float32; keep native-precision copies so resume is exact for any dtype
        torch.save(
            {
                "optimizer": optimizer.state_dict(),
                "scheduler": scheduler.state_dict() if scheduler else None,
                "adapter": [p.detach().clone() for p in adapter_parameters(model)],
            },
            directory / "optimizer.pt",
        )
    manifest = {"train_state": state.to_json(), "config": config.to_json() if config else None}
    (directory / "train_state.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def resume(directory: str | Path, model: CausalLM) -> tuple[CausalLM, TrainState, dict | None]:
    """Restore adapter weights and train state into ``model``.

    Returns the optimizer/scheduler state dicts (or None) alongside.
    """
    directory = Path(directory)
    manifest_path = directory / "train_state.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint found in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
        state = TrainState.from_json(manifest["train_state"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"corrupt checkpoint manifest in {directory}: {exc}") from exc
    import_adapter(model, load_adapter(directory / "adapter"), strict_base=True)
    opt_path = directory / "optimizer.pt"
    opt_state = torch.load(opt_path, weights_only=False) if opt_path.exists() else None
    if opt_state and opt_state.get("adapter"):
        with torch.no_grad():
            for p, saved in zip(adapter_parameters(model), opt_state["adapter"]):
                p.copy_(saved)
    return model, state, opt_state


# ---------------------------------------------------------------------------
# training


class _TokenCache:
    def __init__(self, tokenizer):
        self.tokenizer = tokenizer
        self._cache: dict[tuple[str, str], object] = {}

    def __call__(self, text: str, context: str = ""):
        key = (context, text)
        seq = self._cache.get(key)
        if seq is None:
            seq = self._cache[key] = tokenize(self.tokenizer, text, context)
        return seq


def _check_dev_coverage(train: Sequence[StereoInstance], dev: Sequence[StereoInstance]) -> None:
    missing = {i.bias_type for i in train} - {i.bias_type for i in dev}
    if missing:
        raise ConfigurationError(f"dev set lacks bias types {sorted(missing)}")


def compute_losses(model: CausalLM, chunk: DataChunk, weights: LossWeights, tok: Callable) -> tuple[torch.Tensor, ...]:
    f_seqs = [tok(it.text, it.context) for it in chunk.forget_batch]
    r_seqs = [tok(it.text, it.context) for it in chunk.retain_batch]
    u_seqs = [tok(text) for text in chunk.unrelated_batch]
    theta_f = score_batch(model, f_seqs, use_adapter=True, grad=True)
    ref_f = score_batch(model, f_seqs, use_adapter=False)
    theta_r = score_batch(model, r_seqs, use_adapter=True, grad=True)
    theta_u = next_token_distributions_batch(model, u_seqs, use_adapter=True, grad=True)
    ref_u = next_token_distributions_batch(model, u_seqs, use_adapter=False)
    forget = npo_forget_loss(theta_f, ref_f, weights.beta)
    retention = retention_loss(theta_r)
    kl = kl_unrelated_loss(theta_u, ref_u)
    return forget, retention, kl, weighted_sum(forget, retention, kl, weights)


def train(
    model: CausalLM,
    instances: Sequence[StereoInstance],
    dev_instances: Sequence[StereoInstance],
    config: TrainingConfig,
    *,
    probe: Probe | None = None,
    log_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    chunk_hook: Callable[[int, DataChunk], None] | None = None,
) -> tuple[CausalLM, TrainState, list[dict]]:
    """Run unlearning until early stop or ``max_steps``.

    ``probe`` replaces the default dev evaluation (``stereoset_eval`` on
    ``dev_instances``); it is called as ``probe(model, dev_instances, step)``.
    ``chunk_hook(step, chunk)`` observes every chunk before its update.
    """
    _check_dev_coverage(instances, dev_instances)
    rule = PreferenceRule(config.tie_credit)
    if probe is None:
        def probe(m, dev, step):
            return stereoset_eval(m, dev, rule, step)

    opt_state = None
    if resume_from is not None:
        model, state, opt_state = resume(resume_from, model)
    else:
        state = TrainState()
        if not model.trainable:
            model.attach_adapter(config.lora_rank, config.lora_alpha, config.lora_targets, config.seed)
    params = adapter_parameters(model)
    if not params:
        raise ConfigurationError("model has no trainable adapter")
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    total = max(config.max_steps, 1)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: max(0.0, 1.0 - s / total))
    if opt_state is not None:
        optimizer.load_state_dict(opt_state["optimizer"])
        if opt_state.get("scheduler"):
            scheduler.load_state_dict(opt_state["scheduler"])

    log: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(record: dict) -> None:
        log.append(record)
        if log_fh:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            log_fh.flush()

    tok = _TokenCache(model.tokenizer)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    def make_stream() -> Iterator[DataChunk]:
        pools = build_partitions(instances, state.partition_state, config.adversarial_fraction)
        stream = chunk_stream(
            *pools,
            config.forget_batch,
            config.retain_batch,
            config.unrelated_batch,
            seed=[config.seed, state.rebuilds],
        )
        for _ in range(state.chunks_consumed):
            next(stream)
        return stream

    stream = make_stream()
    try:
        while not state.stopped:
            if state.step >= config.max_steps:
                state.stopped, state.stop_reason = True, "max_steps"
                break
            chunk = next(stream)
            state.chunks_consumed += 1
            if chunk_hook:
                chunk_hook(state.step, chunk)
            model.train()
            lr = scheduler.get_last_lr()[0]
            forget, retention, kl, loss = compute_losses(model, chunk, config.weights, tok)
            if not math.isfinite(float(loss.detach())):
                if ckpt_dir:
                    save_checkpoint(model, state, ckpt_dir / "diagnostic", optimizer, scheduler, config)
                raise NonFiniteLossError(
                    f"non-finite loss at step {state.step + 1}: forget={float(forget.detach())}, "
                    f"retention={float(retention.detach())}, kl={float(kl.detach())}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            optimizer.step()
            scheduler.step()
            state.step += 1
            breakdown: LossBreakdown = total_loss(forget, retention, kl, config.weights)
            emit({"event": "train", "step": state.step, **breakdown.to_json(), "lr": lr})

            if state.step % config.probe_every == 0:
                report = probe(model, dev_instances, state.step)
                state.last_probe = report
                stop = should_stop(report, config.early_stop_band)
                swaps = []
                if not stop:
                    before = len(state.partition_state.swap_log)
                    state.partition_state = maybe_swap(report, state.partition_state, state.step)
                    swaps = state.partition_state.swap_log[before:]
                emit(
                    {
                        "event": "probe",
                        **report.to_json(),
                        "step": state.step,
                        "swaps": [{"bias_type": t, "swapped": f} for _, t, f in swaps],
                    }
                )
                if stop:
                    state.stopped, state.stop_reason = True, "early_stop"
                elif swaps:
                    state.rebuilds += 1
                    state.chunks_consumed = 0
                    stream = make_stream()
            if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(model, state, ckpt_dir / f"step-{state.step:06d}", optimizer, scheduler, config)
        emit({"event": "stop", "step": state.step, "reason": state.stop_reason})
        if ckpt_dir:
            save_checkpoint(model, state, ckpt_dir / "final", optimizer, scheduler, config)
    finally:
        if log_fh:
            log_fh.close()
    return model, state, log
