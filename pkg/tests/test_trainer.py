import json

import pytest
import torch

from biasunlearn.bias_eval import EvalReport, TypeScores, stereoset_eval
from biasunlearn.corpus import ConfigurationError, PartitionState, apply_swap
from biasunlearn.objectives import LossWeights
from biasunlearn.scoring import TableLM, WordTokenizer, adapter_parameters
from biasunlearn.scoring.checkpoint import CheckpointCorruptError, load_adapter
from biasunlearn.trainer import (
    NonFiniteLossError,
    TrainingConfig,
    maybe_swap,
    resume,
    should_stop,
    swap_log_digest,
    train,
)

from conftest import make_instances

TYPES = ("gender", "race", "religion", "profession")


def scripted_report(ss: dict[str, float], step: int = 0) -> EvalReport:
    per = {t: TypeScores(ss=v, lms=90.0, icat=0.0, n=10) for t, v in ss.items()}
    mean = sum(ss.values()) / len(ss)
    return EvalReport(per, TypeScores(mean, 90.0, 0.0, 10 * len(ss)), step)


def scripted_probe(schedule):
    """``schedule(step) -> {type: ss}``; records every call."""
    calls = []

    def probe(model, dev, step):
        calls.append(step)
        return scripted_report(schedule(step), step)

    probe.calls = calls
    return probe


def stub_model(instances, seed=0):
    words = sorted({w for i in instances for s in (i.context, i.stereotype, i.anti_stereotype, i.unrelated) for w in s.split()})
    tok = WordTokenizer(words)
    gen = torch.Generator().manual_seed(seed)
    return TableLM(tok, torch.randn(tok.vocab_size, tok.vocab_size, generator=gen, dtype=torch.float64), dtype=torch.float64)


@pytest.fixture
def corpus():
    return make_instances({t: 12 for t in TYPES})


def _cfg(**kw):
    base = dict(forget_batch=4, retain_batch=8, probe_every=5, max_steps=20, learning_rate=1e-2, lora_rank=2, seed=0)
    base.update(kw)
    return TrainingConfig(**base)


class TestRules:
    def test_should_stop_examples(self):
        assert should_stop(scripted_report(dict(zip(TYPES, (51.9, 48.2, 50.0, 49.5)))), 2)
        assert not should_stop(scripted_report(dict(zip(TYPES, (52.1, 49, 50, 50)))), 2)
        assert should_stop(scripted_report({"gender": 50.4}), 0.5)
        assert should_stop(scripted_report(dict(zip(TYPES, (50.5, 49.1, 51.9, 48.2)))))

    def test_should_stop_boundary_is_exclusive(self):
        assert not should_stop(scripted_report({"gender": 52.0}), 2)
        assert not should_stop(scripted_report({"gender": 48.0}), 2)

    def test_maybe_swap_examples(self):
        s = maybe_swap(scripted_report({"gender": 47, "race": 53}), PartitionState(), 5)
        assert s.swapped == {"gender": True}
        s = PartitionState()
        assert maybe_swap(scripted_report({"gender": 60, "race": 50.0}), s, 5) == s

    def test_swapped_type_toggles_back_on_overshoot(self):
        s = apply_swap(PartitionState(), "gender", 1)
        assert maybe_swap(scripted_report({"gender": 48}), s, 2) == s
        assert maybe_swap(scripted_report({"gender": 53}), s, 2).is_swapped("gender") is False

    def test_digest_tracks_log(self):
        a = apply_swap(PartitionState(), "gender", 1)
        assert swap_log_digest(a) != swap_log_digest(PartitionState())
        assert swap_log_digest(a) == swap_log_digest(apply_swap(PartitionState(), "gender", 1))

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainingConfig(forget_batch=4, retain_batch=4)
        with pytest.raises(ConfigurationError):
            TrainingConfig(probe_every=0)
        with pytest.raises(ConfigurationError):
            TrainingConfig(early_stop_band=0)
        with pytest.raises(ConfigurationError):
            TrainingConfig(schedule="cosine")
        assert TrainingConfig(forget_batch=3, retain_batch=21).unrelated_batch == 3


class TestTrainLoop:
    def test_early_stop_at_first_probe(self, corpus):
        probe = scripted_probe(lambda s: dict(zip(TYPES, (50.5, 49.1, 51.9, 48.2))))
        _, state, log = train(stub_model(corpus), corpus, corpus, _cfg(), probe=probe)
        assert state.stop_reason == "early_stop" and state.step == 5
        assert probe.calls == [5]
        assert log[-1] == {"event": "stop", "step": 5, "reason": "early_stop"}

    def test_single_type_outside_band_continues(self, corpus):
        probe = scripted_probe(lambda s: dict(zip(TYPES, (50.5, 49.1, 52.0, 48.2))))
        _, state, _ = train(stub_model(corpus), corpus, corpus, _cfg(), probe=probe)
        assert state.stop_reason == "max_steps" and state.step == 20
        assert probe.calls == [5, 10, 15, 20]

    def test_max_steps_zero(self, corpus):
        model = stub_model(corpus)
        _, state, log = train(model, corpus, corpus, _cfg(max_steps=0))
        assert (state.step, state.stop_reason) == (0, "max_steps")
        assert [r["event"] for r in log] == ["stop"]

    def test_swap_serves_previous_retain_as_forget(self, corpus):
        probe = scripted_probe(lambda s: {"gender": 47.0 if s == 5 else 45.0, "race": 60.0, "religion": 60.0, "profession": 60.0})
        seen = []
        _, state, log = train(
            stub_model(corpus), corpus, corpus, _cfg(max_steps=10, adversarial_fraction=0.0),
            probe=probe, chunk_hook=lambda step, ch: seen.append((step, ch)),
        )
        probe_rec = next(r for r in log if r["event"] == "probe")
        assert probe_rec["swaps"] == [{"bias_type": "gender", "swapped": True}]
        assert state.partition_state.swapped == {"gender": True}
        before = {(it.instance_id, it.text) for step, ch in seen if step < 5 for it in ch.retain_batch if it.bias_type == "gender"}
        after_forget = [it for step, ch in seen if step >= 5 for it in ch.forget_batch if it.bias_type == "gender"]
        assert after_forget
        by_id = {i.id: i for i in corpus}
        for it in after_forget:
            assert it.text == by_id[it.instance_id].anti_stereotype
        assert before <= {(i.id, i.anti_stereotype) for i in corpus if i.bias_type == "gender"}
        for step, ch in seen:
            for it in ch.forget_batch:
                if it.bias_type != "gender" and not it.adversarial:
                    assert it.text == by_id[it.instance_id].stereotype

    def test_adapter_only_updates(self, corpus):
        model = stub_model(corpus)
        base = {n: p.clone() for n, p in model.base_state().items()}
        model, state, log = train(model, corpus, corpus, _cfg(max_steps=8, probe_every=100))
        for n, p in model.base_state().items():
            assert torch.equal(p, base[n]), n
        assert any(p.abs().sum() > 0 for p in adapter_parameters(model))
        assert len([r for r in log if r["event"] == "train"]) == 8

    def test_probe_purity(self, corpus):
        snapshots = []

        def probe(model, dev, step):
            before = [p.detach().clone() for p in model.parameters()]
            grads = [None if p.grad is None else p.grad.clone() for p in model.parameters()]
            report = stereoset_eval(model, dev, step=step)
            after = list(model.parameters())
            snapshots.append(
                all(torch.equal(a, b) for a, b in zip(before, after))
                and all((g is None and p.grad is None) or torch.equal(g, p.grad) for g, p in zip(grads, after))
            )
            return report

        train(stub_model(corpus), corpus, corpus, _cfg(max_steps=10, probe_every=2), probe=probe)
        assert snapshots and all(snapshots)

    def test_reproducible_log(self, corpus, tmp_path):
        probe = scripted_probe(lambda s: {t: (47.0 if (s // 5) % 2 else 56.0) for t in TYPES})
        for name in ("a", "b"):
            train(stub_model(corpus), corpus, corpus, _cfg(), probe=probe, log_path=tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        recs = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
        train_rec = next(r for r in recs if r["event"] == "train")
        assert set(train_rec) == {"event", "step", "forget", "retention", "kl", "total", "lr"}
        assert any(r["event"] == "probe" and r["swaps"] for r in recs)

    def test_non_finite_aborts_with_diagnostic(self, corpus, tmp_path):
        def poison(step, chunk):
            if step == 3:
                with torch.no_grad():
                    model.head.lora_B.fill_(float("nan"))

        model = stub_model(corpus)
        with pytest.raises(NonFiniteLossError):
            train(model, corpus, corpus, _cfg(checkpoint_dir=str(tmp_path)), chunk_hook=poison)
        assert (tmp_path / "diagnostic" / "train_state.json").exists()

    def test_dev_must_cover_types(self, corpus):
        with pytest.raises(ConfigurationError, match="dev set lacks"):
            train(stub_model(corpus), corpus, [i for i in corpus if i.bias_type != "race"], _cfg())


class TestCheckpoints:
    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        probe = scripted_probe(lambda s: {t: (47.0 if s == 5 else 55.0) for t in TYPES})
        cfg = _cfg(max_steps=10, checkpoint_dir=str(tmp_path / "full"), checkpoint_every=5)
        _, _, full = train(stub_model(corpus), corpus, corpus, cfg, probe=probe)
        cfg2 = _cfg(max_steps=10, checkpoint_dir=str(tmp_path / "resumed"))
        _, state, resumed = train(
            stub_model(corpus), corpus, corpus, cfg2, probe=probe, resume_from=tmp_path / "full" / "step-000005"
        )
        tail = [r for r in full if r["event"] == "train" and r["step"] > 5]
        assert [r for r in resumed if r["event"] == "train"] == tail
        assert state.step == 10

    def test_metadata(self, corpus, tmp_path):
        probe = scripted_probe(lambda s: {t: 47.0 for t in TYPES})
        _, state, _ = train(stub_model(corpus), corpus, corpus, _cfg(max_steps=5, checkpoint_dir=str(tmp_path)), probe=probe)
        meta = load_adapter(tmp_path / "final" / "adapter").metadata
        assert meta["swap_log_digest"] == swap_log_digest(state.partition_state)
        assert meta["training_step"] == 5
        assert meta["loss_weights"] == {"alpha1": 0.4, "alpha2": 0.4, "alpha3": 0.2, "beta": 0.1}

    def test_resume_empty_dir(self, corpus, tmp_path):
        with pytest.raises(FileNotFoundError):
            resume(tmp_path, stub_model(corpus))

    def test_resume_corrupt_manifest(self, corpus, tmp_path):
        train(stub_model(corpus), corpus, corpus, _cfg(max_steps=1, checkpoint_dir=str(tmp_path)))
        (tmp_path / "final" / "train_state.json").write_text("{ broken")
        with pytest.raises(CheckpointCorruptError):
            resume(tmp_path / "final", stub_model(corpus))


def test_custom_weights_reach_loss(corpus):
    probe = scripted_probe(lambda s: {t: 60.0 for t in TYPES})
    _, _, log = train(stub_model(corpus), corpus, corpus, _cfg(max_steps=1, weights=LossWeights(1, 0, 0)), probe=probe)
    rec = log[0]
    assert rec["total"] == pytest.approx(rec["forget"])
