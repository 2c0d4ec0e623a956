import numpy as np
import pytest
import torch

from tapner.errors import (
    ChecksumError,
    ConfigError,
    ConfigMismatchError,
    ContextOverflowError,
    UnknownTokenError,
)
from tapner.model import (
    DecodeParams,
    LMTrainConfig,
    ModelConfig,
    Vocab,
    apply_repetition_penalty,
    greedy_generate,
    init_model,
    lm_eval_loss,
    load_model,
    save_model,
    train_toy_lm,
)

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                  vocab_size=50, max_context=64, seed=7)


@pytest.fixture(scope="module")
def model():
    return init_model(CFG)


@pytest.fixture(scope="module")
def tokens():
    return [3, 9, 4, 4, 11, 30, 2, 8, 17, 5, 6, 1]


class TestInit:
    def test_same_seed_same_checksum(self):
        assert init_model(CFG).weights_checksum() == init_model(CFG).weights_checksum()

    def test_different_seed_differs(self):
        other = ModelConfig(**{**CFG.as_dict(), "seed": 8})
        assert init_model(CFG).weights_checksum() != init_model(other).weights_checksum()

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=2, n_heads=4, d_model=30, d_ff=64,
                        vocab_size=50, max_context=64)

    def test_zero_dims_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=0, n_heads=2, d_model=32, d_ff=64,
                        vocab_size=50, max_context=64)
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                        vocab_size=50, max_context=1)

    def test_parameter_count_matches_analytic_formula(self):
        # Hand count: embeddings V*d + N*d; per block two LayerNorms (2d each),
        # qkv d*3d + 3d, attention out d*d + d, MLP d*ff + ff and ff*d + d;
        # final LayerNorm 2d; output head tied to the token embedding.
        cfg = ModelConfig(n_layers=4, n_heads=4, d_model=128, d_ff=512,
                          vocab_size=96, max_context=256, seed=0)
        d, ff, L = cfg.d_model, cfg.d_ff, cfg.n_layers
        per_block = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
            + (d * ff + ff) + (ff * d + d)
        expected = cfg.vocab_size * d + cfg.max_context * d + L * per_block + 2 * d
        assert init_model(cfg).n_params() == expected


class TestForwardFull:
    def test_attention_rows_sum_to_one(self, model, tokens):
        b = model.forward_full(tokens)
        sums = b.attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_first_token_attends_only_to_itself(self, model, tokens):
        b = model.forward_full(tokens)
        expected = torch.ones(CFG.n_layers, CFG.n_heads, dtype=torch.float64)
        assert torch.allclose(b.attn[:, :, 0, 0], expected)

    def test_causality(self, model, tokens):
        b = model.forward_full(tokens)
        n = len(tokens)
        for j in range(n):
            assert torch.all(b.attn[:, :, j, j + 1 :] == 0)

    def test_shapes(self, model):
        b = model.forward_full([1, 2, 3, 4, 5])
        assert tuple(b.hidden.shape) == (CFG.n_layers + 1, 5, CFG.d_model)
        assert tuple(b.attn.shape) == (CFG.n_layers, CFG.n_heads, 5, 5)
        assert tuple(b.logits.shape) == (5, CFG.vocab_size)

    def test_sequence_too_long(self, model):
        with pytest.raises(ContextOverflowError):
            model.forward_full([1] * (CFG.max_context + 1))

    def test_unknown_token(self, model):
        with pytest.raises(UnknownTokenError):
            model.forward_full([1, CFG.vocab_size])


class TestDecodeStep:
    def test_incremental_equals_full(self, model, tokens):
        full = model.forward_full(tokens)
        cache = model.init_cache(len(tokens))
        bundle = model.new_bundle(len(tokens))
        for t in tokens:
            logits, hidden_col, attn_rows, cache = model.decode_step(cache, t)
            bundle.append(hidden_col, attn_rows, logits)
        n = len(tokens)
        assert torch.allclose(bundle.hidden[:, :n], full.hidden, atol=1e-6)
        assert torch.allclose(bundle.attn[:, :, :n, :n], full.attn, atol=1e-6)
        assert torch.allclose(bundle.logits[:n], full.logits, atol=1e-6)

    def test_single_token_base_case(self, model):
        full = model.forward_full([5])
        cache = model.init_cache(4)
        logits, hidden_col, attn_rows, _ = model.decode_step(cache, 5)
        assert torch.allclose(logits, full.logits[0], atol=1e-6)
        assert torch.allclose(hidden_col, full.hidden[:, 0], atol=1e-6)

    def test_attn_row_length_grows_per_step(self, model):
        cache = model.init_cache(50)
        for step in range(50):
            _, _, attn_rows, cache = model.decode_step(cache, step % CFG.vocab_size)
            assert attn_rows.shape == (CFG.n_layers, CFG.n_heads, step + 1)

    def test_cache_model_mismatch(self, model):
        other = init_model(ModelConfig(**{**CFG.as_dict(), "seed": 9}))
        cache = other.init_cache(4)
        with pytest.raises(ConfigError):
            model.decode_step(cache, 1)

    def test_stale_cache_after_update(self):
        m = init_model(CFG)
        cache = m.init_cache(4)
        m.mark_updated()
        with pytest.raises(ConfigError):
            m.decode_step(cache, 1)

    def test_cache_capacity_overflow(self, model):
        cache = model.init_cache(2)
        model.decode_step(cache, 1)
        model.decode_step(cache, 2)
        with pytest.raises(ContextOverflowError):
            model.decode_step(cache, 3)


class TestRepetitionPenalty:
    def test_positive_logit_divided(self):
        row = torch.tensor([2.0, 0.5], dtype=torch.float64)
        out = apply_repetition_penalty(row, {0}, 1.2)
        assert out[0].item() == pytest.approx(2.0 / 1.2)  # 1.6667
        assert out[1].item() == 0.5

    def test_negative_logit_multiplied(self):
        row = torch.tensor([-1.0, 0.5], dtype=torch.float64)
        out = apply_repetition_penalty(row, {0}, 1.2)
        assert out[0].item() == pytest.approx(-1.2)

    def test_identity_at_one(self):
        row = torch.tensor([2.0, -1.0, 0.3], dtype=torch.float64)
        out = apply_repetition_penalty(row, {0, 1, 2}, 1.0)
        assert torch.equal(out, row)

    def test_rejects_below_one(self):
        with pytest.raises(ConfigError):
            apply_repetition_penalty(torch.zeros(3), {0}, 0.9)
        with pytest.raises(ConfigError):
            DecodeParams(repetition_penalty=0.5)

    def test_input_row_not_mutated(self):
        row = torch.tensor([2.0, 0.5], dtype=torch.float64)
        apply_repetition_penalty(row, {0}, 1.5)
        assert row[0].item() == 2.0


class TestGreedyGenerate:
    def test_deterministic(self, model):
        params = DecodeParams(max_new_tokens=12, repetition_penalty=1.2)
        a = greedy_generate(model, [1, 2, 3], params)
        b = greedy_generate(model, [1, 2, 3], params)
        assert a == b
        assert len(a) == 15

    def test_empty_prompt_rejected(self, model):
        with pytest.raises(ValueError):
            greedy_generate(model, [], DecodeParams(max_new_tokens=4))

    def test_context_overflow_rejected(self, model):
        with pytest.raises(ConfigError):
            greedy_generate(model, [1], DecodeParams(max_new_tokens=CFG.max_context))


def _toy_docs(rng, n=60, length=12):
    # Highly regular bigram corpus the tiny LM can learn quickly.
    docs = []
    for _ in range(n):
        start = int(rng.integers(0, 10))
        docs.append([(start + k) % 20 + 1 for k in range(length)])
    return docs


class TestTrainToyLM:
    def test_loss_improves_and_is_seeded(self):
        rng = np.random.default_rng(0)
        docs = _toy_docs(rng)
        held_out = _toy_docs(np.random.default_rng(1), n=10)
        cfg = LMTrainConfig(steps=60, batch_size=8, seq_len=16, lr=3e-3,
                            warmup_steps=5, seed=0)

        m1 = init_model(CFG)
        before = lm_eval_loss(m1, held_out, seq_len=16)
        train_toy_lm(m1, docs, cfg)
        after1 = lm_eval_loss(m1, held_out, seq_len=16)
        assert after1 < before

        m2 = init_model(CFG)
        train_toy_lm(m2, docs, cfg)
        after2 = lm_eval_loss(m2, held_out, seq_len=16)
        assert after1 == after2

    def test_zero_steps_leaves_weights_unchanged(self):
        m = init_model(CFG)
        checksum = m.weights_checksum()
        train_toy_lm(m, [[1, 2, 3] * 10], LMTrainConfig(steps=0))
        assert m.weights_checksum() == checksum

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_toy_lm(init_model(CFG), [], LMTrainConfig(steps=5))


class TestWeightSerialization:
    def test_round_trip_bit_exact(self, tmp_path, model):
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.weights_checksum() == model.weights_checksum()
        assert loaded.cfg == model.cfg

    def test_truncated_file_fails_checksum(self, tmp_path, model):
        path = tmp_path / "m.bin"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_corrupted_payload_fails_checksum(self, tmp_path, model):
        path = tmp_path / "m.bin"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[-8] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_config_mismatch_rejected(self, tmp_path, model):
        path = tmp_path / "m.bin"
        save_model(model, path)
        wrong = ModelConfig(**{**CFG.as_dict(), "d_model": 64, "d_ff": 128})
        with pytest.raises(ConfigMismatchError):
            load_model(path, expect=wrong)


class TestVocab:
    def test_word_round_trip(self):
        v = Vocab.build(["anna reyes visited port ilum ."])
        ids = v.encode("anna reyes visited port ilum .")
        assert v.decode(ids) == "anna reyes visited port ilum ."

    def test_unknown_words_map_to_unk(self):
        v = Vocab.build(["a b c"])
        assert v.encode("a z")[1] == v.unk_id

    def test_byte_granularity(self):
        v = Vocab.build(["abc"], granularity="byte")
        ids = v.encode("cab")
        assert v.decode(ids) == "cab"

    def test_save_load(self, tmp_path):
        v = Vocab.build(["x y z"])
        v.save(tmp_path / "v.json")
        w = Vocab.load(tmp_path / "v.json")
        assert w.id_to_piece == v.id_to_piece
        assert w.content_hash() == v.content_hash()
