import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from biasunlearn.scoring import (
    AdapterShapeError,
    BaseMismatchError,
    CheckpointCorruptError,
    ContextWindowError,
    HFCausalLM,
    HFTokenizer,
    TableLM,
    TinyConfig,
    TinyTransformerLM,
    TokenizationError,
    WordTokenizer,
    adapter_disabled,
    export_adapter,
    import_adapter,
    load_adapter,
    load_model,
    next_token_distributions,
    next_token_distributions_batch,
    perturbed_sibling,
    save_adapter,
    save_model,
    score_batch,
    sequence_logprob,
    tokenize,
)
from biasunlearn.scoring.lora import base_parameters

SENTENCES = [f"the {w} worker said {v} things" for w in ("new", "old", "tall", "kind", "loud") for v in range(10)]


def _tiny(seed=0, d_model=32, vocab_words=None):
    tok = WordTokenizer.from_texts(vocab_words or SENTENCES)
    return TinyTransformerLM(tok, TinyConfig(tok.vocab_size, d_model=d_model, n_heads=4, max_len=16), seed=seed)


def _probe_seqs(model):
    return [tokenize(model.tokenizer, s.split(" ", 2)[2], " ".join(s.split(" ", 2)[:2])) for s in SENTENCES[:12]]


# ---------------------------------------------------------------------------
# tokenization


class TestTokenize:
    def test_empty_context(self):
        tok = WordTokenizer(["a", "b"])
        seq = tokenize(tok, "a b")
        assert seq.prompt_len == 1  # BOS only
        assert seq.ids == (tok.bos_id, tok.index["a"], tok.index["b"])

    def test_deterministic(self):
        tok = WordTokenizer.from_texts(SENTENCES)
        assert tokenize(tok, "kind things", "the worker") == tokenize(tok, "kind things", "the worker")

    def test_target_region(self):
        tok = WordTokenizer.from_texts(SENTENCES)
        seq = tokenize(tok, "said 3 things", "the old worker")
        assert seq.target_ids == tuple(tok.encode("said 3 things"))
        assert seq.ids[: seq.prompt_len] == (tok.bos_id, *tok.encode("the old worker"))

    def test_empty_text(self):
        with pytest.raises(TokenizationError):
            tokenize(WordTokenizer(["a"]), "  ", "a")

    def test_bpe_prefix_property_with_fallback(self):
        tokenizers = pytest.importorskip("tokenizers")
        from transformers import PreTrainedTokenizerFast

        bpe = tokenizers.Tokenizer(tokenizers.models.BPE(unk_token="<unk>"))
        bpe.pre_tokenizer = tokenizers.pre_tokenizers.ByteLevel(add_prefix_space=False)
        trainer = tokenizers.trainers.BpeTrainer(vocab_size=300, special_tokens=["<bos>", "<unk>", "<pad>"])
        bpe.train_from_iterator(SENTENCES * 3, trainer)
        fast = PreTrainedTokenizerFast(tokenizer_object=bpe, bos_token="<bos>", unk_token="<unk>", pad_token="<pad>")
        tok = HFTokenizer(fast)
        joint_ok = 0
        for s in SENTENCES:
            ctx, text = s.rsplit(" ", 2)[0], " ".join(s.rsplit(" ", 2)[1:])
            seq = tokenize(tok, text, ctx)
            prefix = [tok.bos_id] + tok.encode(ctx)
            assert list(seq.ids[: seq.prompt_len]) == prefix
            joint = [tok.bos_id] + tok.encode(f"{ctx} {text}")
            if list(seq.ids) == joint:
                joint_ok += 1
            else:
                assert list(seq.target_ids) == tok.encode(f" {text}")
        assert joint_ok >= 1


# ---------------------------------------------------------------------------
# stub scoring


class TestStubScoring:
    def test_uniform_vocab4(self):
        tok = WordTokenizer(["a"])
        assert tok.vocab_size == 4
        model = TableLM(tok)
        score = sequence_logprob(model, tokenize(tok, "a a a"))
        np.testing.assert_allclose(score.token_logprobs.numpy(), [math.log(0.25)] * 3, rtol=1e-6)
        assert float(score.sum) == pytest.approx(-4.1589, abs=1e-4)
        assert float(score.mean) == pytest.approx(math.log(0.25), rel=1e-6)

    def test_chain_rule_against_hand_table(self):
        tok = WordTokenizer(["x", "y"])  # vocab 5: pad bos unk x y
        V = tok.vocab_size
        P = np.full((V, V), 1e-3)
        P[tok.bos_id] = [0, 0, 0, 0.7, 0.3]
        P[tok.index["x"]] = [0, 0, 0, 0.2, 0.8]
        P[tok.index["y"]] = [0, 0, 0, 0.6, 0.4]
        P = P / P.sum(1, keepdims=True)
        model = TableLM.from_probabilities(tok, P, dtype=torch.float64)
        for text in ("x", "x y", "y y x", "x x y y"):
            seq = tokenize(tok, text)
            ids = seq.ids
            expected = [math.log(P[ids[i - 1], ids[i]]) for i in range(1, len(ids))]
            score = sequence_logprob(model, seq)
            np.testing.assert_allclose(score.token_logprobs.numpy(), expected, rtol=1e-9)
            prod = math.prod(P[ids[i - 1], ids[i]] for i in range(1, len(ids)))
            assert math.exp(float(score.sum)) == pytest.approx(prod, rel=1e-6)

    def test_context_excluded_from_target(self):
        tok = WordTokenizer(["x", "y"])
        model = TableLM(tok)
        assert sequence_logprob(model, tokenize(tok, "y", "x x x")).count == 1

    def test_distributions_equal_table_rows(self):
        tok = WordTokenizer(["x", "y"])
        gen = torch.Generator().manual_seed(0)
        table = torch.randn(tok.vocab_size, tok.vocab_size, generator=gen, dtype=torch.float64)
        model = TableLM(tok, table, dtype=torch.float64)
        seq = tokenize(tok, "y x", "x")
        dists = next_token_distributions(model, seq)
        for row, prev in zip(dists, seq.ids[seq.prompt_len - 1 : -1]):
            torch.testing.assert_close(row, table[prev].log_softmax(-1))

    def test_context_window(self):
        tok = WordTokenizer(["x"])
        model = TableLM(tok, max_len=4)
        with pytest.raises(ContextWindowError):
            sequence_logprob(model, tokenize(tok, "x x x x x"))

    def test_zero_adapter_identity(self):
        model = _tiny()
        model.attach_adapter(rank=4, seed=3)
        seqs = _probe_seqs(model)
        on = score_batch(model, seqs, use_adapter=True)
        off = score_batch(model, seqs, use_adapter=False)
        for a, b in zip(on, off):
            assert torch.equal(a.token_logprobs, b.token_logprobs)
        for a, b in zip(next_token_distributions_batch(model, seqs, True), next_token_distributions_batch(model, seqs, False)):
            assert torch.equal(a, b)

    def test_reference_ignores_adapter(self, random_table_lm):
        model = random_table_lm(seed=1)
        tok = model.tokenizer
        seq = tokenize(tok, "w1 w2 w3", "w0")
        ref1 = sequence_logprob(model, seq, use_adapter=False)
        with torch.no_grad():
            model.head.lora_B.add_(1.0)
        ref2 = sequence_logprob(model, seq, use_adapter=False)
        assert torch.equal(ref1.token_logprobs, ref2.token_logprobs)
        assert not ref2.token_logprobs.requires_grad
        assert not torch.equal(ref1.token_logprobs, sequence_logprob(model, seq).token_logprobs)

    def test_adapter_disabled_restores_flags(self, random_table_lm):
        model = random_table_lm()
        with adapter_disabled(model):
            assert model.head.enabled is False
        assert model.head.enabled is True

    @given(seed=st.integers(0, 1000), n=st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_distributions_normalized(self, seed, n):
        model = _tiny(seed=seed % 5)
        model.attach_adapter(rank=2, seed=seed)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in model.modules():
                if hasattr(m, "lora_B"):
                    m.lora_B.normal_(generator=gen)
        words = model.tokenizer.vocab[3:]
        idx = torch.randint(len(words), (n + 1,), generator=gen).tolist()
        seq = tokenize(model.tokenizer, " ".join(words[i] for i in idx[1:]), words[idx[0]])
        for use in (True, False):
            d = next_token_distributions(model, seq, use)
            np.testing.assert_allclose(d.double().exp().sum(-1).numpy(), 1.0, atol=1e-6)
        s = sequence_logprob(model, seq)
        assert (s.token_logprobs <= 0).all()


# ---------------------------------------------------------------------------
# adapter transfer


def _trained_adapter(model, seed=0):
    model.attach_adapter(rank=4, seed=seed)
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for m in model.modules():
            if hasattr(m, "lora_B"):
                m.lora_B.normal_(std=0.5, generator=gen)
    return model


class TestAdapterTransfer:
    def test_roundtrip_bit_exact(self, tmp_path):
        donor = _trained_adapter(_tiny())
        seqs = _probe_seqs(donor)
        before = score_batch(donor, seqs)
        ckpt = export_adapter(donor, {"training_step": 7})
        save_adapter(ckpt, tmp_path / "ad")
        loaded = load_adapter(tmp_path / "ad")
        for name, (A, B) in ckpt.matrices.items():
            assert np.array_equal(A, loaded.matrices[name][0])
            assert np.array_equal(B, loaded.matrices[name][1])
        assert loaded.metadata["training_step"] == 7

        fresh = _tiny()
        import_adapter(fresh, loaded, strict_base=True)
        after = score_batch(fresh, seqs)
        for a, b in zip(before, after):
            assert torch.equal(a.token_logprobs, b.token_logprobs)

    def test_blob_format(self, tmp_path):
        donor = _trained_adapter(_tiny())
        ckpt = export_adapter(donor)
        save_adapter(ckpt, tmp_path)
        name, (A, _) = next(iter(ckpt.matrices.items()))
        raw = (tmp_path / f"{name}.A.f32").read_bytes()
        assert raw == A.astype("<f4").tobytes(order="C")

    def test_corrupt_blob(self, tmp_path):
        save_adapter(export_adapter(_trained_adapter(_tiny())), tmp_path)
        blob = next(tmp_path.glob("*.f32"))
        blob.write_bytes(b"\0" + blob.read_bytes()[1:])
        with pytest.raises(CheckpointCorruptError):
            load_adapter(tmp_path)

    def test_shape_mismatch(self):
        ckpt = export_adapter(_trained_adapter(_tiny(d_model=32)))
        target = _tiny(d_model=48)
        with pytest.raises(AdapterShapeError, match="blocks.0.attn.q"):
            import_adapter(target, ckpt, strict_base=False)

    def test_base_id_strictness(self):
        ckpt = export_adapter(_trained_adapter(_tiny()))
        sib = perturbed_sibling(_tiny(), base_id="tiny-instruct")
        with pytest.raises(BaseMismatchError):
            import_adapter(sib, ckpt, strict_base=True)
        import_adapter(sib, ckpt, strict_base=False)

    def test_sibling_keeps_matrices_changes_scores(self):
        donor = _trained_adapter(_tiny())
        ckpt = export_adapter(donor)
        sib = perturbed_sibling(donor, scale=0.05, seed=1)
        assert not sib.trainable
        import_adapter(sib, ckpt, strict_base=False)
        again = export_adapter(sib)
        for name, (A, B) in ckpt.matrices.items():
            assert np.array_equal(A, again.matrices[name][0])
            assert np.array_equal(B, again.matrices[name][1])
        seqs = _probe_seqs(donor)
        d = torch.cat([s.token_logprobs for s in score_batch(donor, seqs)])
        s = torch.cat([s.token_logprobs for s in score_batch(sib, seqs)])
        assert not torch.equal(d, s)

    def test_import_leaves_base_untouched(self):
        model = _tiny()
        base_before = {n: p.clone() for n, p in model.base_state().items()}
        import_adapter(model, export_adapter(_trained_adapter(_tiny())))
        for n, p in model.base_state().items():
            assert torch.equal(p, base_before[n])

    def test_model_save_load(self, tmp_path):
        model = _trained_adapter(_tiny())
        save_model(model, tmp_path / "m")
        loaded = load_model(tmp_path / "m")
        assert not loaded.trainable
        seqs = _probe_seqs(model)
        with adapter_disabled(model):
            ref = score_batch(model, seqs)
        for a, b in zip(ref, score_batch(loaded, seqs)):
            assert torch.equal(a.token_logprobs, b.token_logprobs)

    def test_only_adapter_params_require_grad(self):
        model = _trained_adapter(_tiny())
        for name, p in model.named_parameters():
            assert p.requires_grad == ("lora_" in name)
        assert all(not p.requires_grad for _, p in base_parameters(model))


class TestHFBackend:
    @pytest.fixture
    def gpt2(self):
        from transformers import GPT2Config, GPT2LMHeadModel

        tok = WordTokenizer.from_texts(SENTENCES)
        torch.manual_seed(0)
        cfg = GPT2Config(vocab_size=tok.vocab_size, n_positions=32, n_embd=32, n_layer=1, n_head=2)
        return HFCausalLM(GPT2LMHeadModel(cfg).eval(), tok, base_id="gpt2-tiny")

    def test_conv1d_adapter_identity_and_roundtrip(self, gpt2):
        names = gpt2.attach_adapter(rank=2)
        assert names == ["model.transformer.h.0.attn.c_attn"]
        seqs = _probe_seqs(gpt2)
        on, off = score_batch(gpt2, seqs, True), score_batch(gpt2, seqs, False)
        for a, b in zip(on, off):
            assert torch.equal(a.token_logprobs, b.token_logprobs)
        with torch.no_grad():
            gpt2.model.transformer.h[0].attn.c_attn.lora_B.normal_()
        trained = score_batch(gpt2, seqs)
        ckpt = export_adapter(gpt2)
        gpt2.detach_adapter()
        import_adapter(gpt2, ckpt)
        for a, b in zip(trained, score_batch(gpt2, seqs)):
            assert torch.equal(a.token_logprobs, b.token_logprobs)
