"""Model-level contracts: encoder shapes, decoder variants, losses, registry, checkpoints."""

import math

import numpy as np
import pytest

from muteasr import autodiff as ad
from muteasr import model as M
from muteasr.autodiff import Tensor
from muteasr.corpus import EOS, SOS, TextSample, Utterance, Vocabulary
from muteasr.errors import ContractError

from gradcheck import check_gradients


def tiny_config(variant="baseline", **overrides):
    base = dict(
        vocab_size=7,
        feature_dim=3,
        conv_layers=1,
        conv_channels=4,
        encoder_layers=1,
        encoder_hidden=3,
        decoder_layers=2,
        decoder_hidden=8,
        embed_dim=8,
        attention_dim=4,
        variant=variant,
        text_split=1,
    )
    base.update(overrides)
    return M.ModelConfig(**base)


def tiny_vocab():
    return Vocabulary.default(4)


def tiny_model(variant="baseline", seed=0, **overrides):
    return M.LasModel(tiny_config(variant, **overrides), tiny_vocab(), seed=seed)


def tiny_utterance(rng, t=7, f=3, u=3):
    return Utterance(
        id="u", features=rng.normal(size=(t, f)), transcript=list(rng.integers(3, 7, size=u))
    )


def adam_step(params, state, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        m, v, t = state.setdefault(i, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        t += 1
        m = b1 * m + (1 - b1) * p.grad
        v = b2 * v + (1 - b2) * p.grad**2
        state[i] = (m, v, t)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class TestEncode:
    def test_desk_shape_arithmetic(self):
        # Two stride-2 same-padded convs: 16 frames -> 8 -> 4.
        cfg = M.ModelConfig.desk()
        model = M.LasModel(cfg, Vocabulary.default(16), seed=0)
        enc = model.encode(np.zeros((16, cfg.feature_dim)), "train")
        assert enc.shape == (4, cfg.encoder_out_dim)

    def test_frozen_mode_preserves_running_stats(self):
        rng = np.random.default_rng(0)
        model = tiny_model()
        model.encode(rng.normal(size=(9, 3)), "train")  # move stats off init
        before = [(l.bn.running_mean.copy(), l.bn.running_var.copy()) for l in model.conv]
        model.encode(rng.normal(size=(9, 3)), "frozen")
        for layer, (m, v) in zip(model.conv, before):
            np.testing.assert_array_equal(layer.bn.running_mean, m)
            np.testing.assert_array_equal(layer.bn.running_var, v)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        model = tiny_model()
        feats = rng.normal(size=(9, 3))
        a = model.encode(feats, "eval").data
        b = model.encode(feats, "eval").data
        np.testing.assert_array_equal(a, b)

    def test_too_short_rejected(self):
        model = tiny_model()
        with pytest.raises(ContractError):
            model.encode(np.zeros((2, 3)), "train")


class TestDecodeStepAudio:
    def test_single_frame_forces_context(self):
        rng = np.random.default_rng(2)
        model = tiny_model(seed=3)
        enc = Tensor(rng.normal(size=(1, model.config.encoder_out_dim)))
        state = model.init_state()
        for tok in (SOS, 3, 4):
            _, state, weights = model.decode_step_audio(tok, state, enc)
            np.testing.assert_allclose(weights.data, [1.0])

    def test_variants_share_audio_path(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(9, 3))
        outs = []
        for variant in M.VARIANTS:
            model = tiny_model(variant, seed=11)
            enc = model.encode(feats, "eval")
            logits, _, _ = model.decode_step_audio(SOS, model.init_state(), enc)
            outs.append(logits.data)
        for other in outs[1:]:
            np.testing.assert_array_equal(outs[0], other)

    def test_step_distribution_is_valid(self):
        rng = np.random.default_rng(4)
        model = tiny_model(seed=5)
        enc = model.encode(rng.normal(size=(9, 3)), "eval")
        logits, _, _ = model.decode_step_audio(SOS, model.init_state(), enc)
        probs = ad.softmax_row(logits).data
        assert (probs >= 0).all()
        assert abs(probs.sum() - 1.0) <= 1e-12

    def test_out_of_range_token(self):
        model = tiny_model()
        enc = model.encode(np.zeros((7, 3)), "eval")
        with pytest.raises(IndexError):
            model.decode_step_audio(7, model.init_state(), enc)


class TestDecodeStepText:
    def test_baseline_rejected(self):
        with pytest.raises(ContractError):
            tiny_model("baseline").decode_step_text(SOS, tiny_model("baseline").init_state())

    def test_mute_z_equals_audio_step_with_zero_context(self):
        model = tiny_model("mute-z", seed=7)
        state_t = model.init_state()
        state_a = model.init_state()
        # A single all-zero encoder frame forces a zero attention context.
        zero_enc = Tensor(np.zeros((1, model.config.encoder_out_dim)))
        for tok in (SOS, 3, 5):
            logits_t, state_t = model.decode_step_text(tok, state_t)
            logits_a, state_a, _ = model.decode_step_audio(tok, state_a, zero_enc)
            np.testing.assert_array_equal(logits_t.data, logits_a.data)

    def test_mute_zt_ignores_audio_decoder_params(self):
        model = tiny_model("mute-zt", seed=8)

        def text_logits():
            state = model.init_state()
            out = []
            for tok in (SOS, 4, 6):
                logits, state = model.decode_step_text(tok, state)
                out.append(logits.data.copy())
            return np.array(out)

        base = text_logits()
        for entry in model.registry():
            if entry.partition in ("decoder-audio", "attention"):
                orig = entry.tensor.data.copy()
                entry.tensor.data = orig + 0.37
                np.testing.assert_array_equal(text_logits(), base)
                entry.tensor.data = orig

    def test_mute_lt_depends_on_learned_context(self):
        model = tiny_model("mute-lt", seed=9)
        state = model.init_state()
        before, _ = model.decode_step_text(3, state)
        model.context.data = model.context.data + 0.5
        after, _ = model.decode_step_text(3, model.init_state())
        assert not np.array_equal(before.data, after.data)

    def test_mute_l_equals_mute_z_at_zero_init(self):
        # The learned context starts at zeros, so the variants coincide.
        zl = tiny_model("mute-z", seed=10)
        ll = tiny_model("mute-l", seed=10)
        lz, _ = zl.decode_step_text(4, zl.init_state())
        lll, _ = ll.decode_step_text(4, ll.init_state())
        np.testing.assert_array_equal(lz.data, lll.data)


class TestLossAudioText:
    def test_untrained_model_near_log_vocab(self):
        rng = np.random.default_rng(5)
        model = tiny_model(seed=12)
        batch = [tiny_utterance(rng) for _ in range(3)]
        loss = float(model.loss_audio_text(batch, "train").data)
        assert abs(loss - math.log(7)) / math.log(7) < 0.10

    def test_single_utterance_batch_equals_unbatched(self):
        rng = np.random.default_rng(6)
        model = tiny_model(seed=13)
        utt = tiny_utterance(rng)
        a = float(model.loss_audio_text([utt], "eval").data)
        b = float(model.loss_audio_text([utt], "eval").data)
        assert a == b

    def test_memorizes_single_utterance(self):
        rng = np.random.default_rng(7)
        model = tiny_model(seed=14)
        utt = tiny_utterance(rng, t=8, u=3)
        params = model.parameters()
        state = {}
        losses = []
        for _ in range(50):
            model.zero_grads()
            with ad.record():
                loss = model.loss_audio_text([utt], "train")
                ad.backward(loss)
            losses.append(float(loss.data))
            adam_step(params, state, lr=1e-3)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_text_sample_rejected(self):
        model = tiny_model()
        with pytest.raises(ContractError):
            model.loss_audio_text([TextSample("t", [3, 4])], "train")

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            tiny_model().loss_audio_text([], "train")


class TestLossTextOnly:
    def test_baseline_rejected(self):
        with pytest.raises(ContractError):
            tiny_model("baseline").loss_text_only([TextSample("t", [3])])

    def test_memorizes_single_sample(self):
        model = tiny_model("mute-z", seed=15)
        sample = TextSample("t", [3, 5, 4, 6])
        params = model.parameters()
        state = {}
        loss = None
        for _ in range(400):
            model.zero_grads()
            with ad.record():
                loss = model.loss_text_only([sample])
                ad.backward(loss)
            adam_step(params, state, lr=5e-3)
            if float(loss.data) < 0.1:
                break
        assert float(loss.data) < 0.1

    def test_no_encoder_gradient(self):
        model = tiny_model("mute-l", seed=16)
        model.zero_grads()
        with ad.record():
            ad.backward(model.loss_text_only([TextSample("t", [3, 4, 5])]))
        for entry in model.registry():
            if entry.partition == "encoder":
                assert entry.tensor.grad is None

    @pytest.mark.parametrize("variant", ["mute-zt", "mute-lt"])
    def test_split_variants_isolate_audio_partitions(self, variant):
        model = tiny_model(variant, seed=17)
        model.zero_grads()
        with ad.record():
            ad.backward(model.loss_text_only([TextSample("t", [3, 4, 6])]))
        for entry in model.registry():
            if entry.partition in ("encoder", "decoder-audio", "attention"):
                assert entry.tensor.grad is None, entry.name
            elif entry.partition in ("decoder-text", "shared-decoder-io"):
                assert entry.tensor.grad is not None, entry.name

    def test_audio_loss_reaches_all_decoder_partitions(self):
        rng = np.random.default_rng(8)
        model = tiny_model("mute-zt", seed=18)
        model.zero_grads()
        with ad.record():
            ad.backward(model.loss_audio_text([tiny_utterance(rng)], "train"))
        for entry in model.registry():
            if entry.partition in ("decoder-audio", "decoder-text", "shared-decoder-io", "attention"):
                if entry.name.startswith("decoder.text_in"):
                    continue  # text-entry adapter is not on the audio path
                assert entry.tensor.grad is not None, entry.name

    def test_batch_is_mean_of_single_sample_losses(self):
        model = tiny_model("mute-z", seed=19)
        samples = [TextSample("a", [3, 4]), TextSample("b", [5, 6, 4, 3])]
        batched = float(model.loss_text_only(samples).data)
        singles = [float(model.loss_text_only([s]).data) for s in samples]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)


class TestRegistry:
    @pytest.mark.parametrize("variant", M.VARIANTS)
    def test_partition_is_exact(self, variant):
        model = tiny_model(variant)
        entries = model.registry()
        seen_ids = [id(e.tensor) for e in entries]
        assert len(seen_ids) == len(set(seen_ids))
        assert {e.partition for e in entries} <= set(M.PARTITIONS)
        # Every trainable tensor owned by the model appears exactly once.
        all_params = set(seen_ids)
        for attr in ("embedding", "out_w", "out_b", "context", "text_in_w", "text_in_b"):
            t = getattr(model, attr)
            if t is not None:
                assert id(t) in all_params

    def test_split_assigns_top_layers_to_text(self):
        model = tiny_model("mute-zt")
        parts = {e.name: e.partition for e in model.registry()}
        assert parts["decoder.cell0.wx"] == "decoder-audio"
        assert parts["decoder.cell1.wx"] == "decoder-text"
        assert parts["decoder.text_in.w"] == "decoder-text"

    def test_non_split_layers_all_audio(self):
        model = tiny_model("mute-l")
        for e in model.registry():
            if e.name.startswith("decoder.cell"):
                assert e.partition == "decoder-audio"


class TestFusionLm:
    def test_zero_weights_uniform(self):
        lm = M.FusionLm(M.LmConfig(vocab_size=7, embed_dim=4, hidden=5), tiny_vocab(), seed=0)
        for t in lm.parameters():
            t.data = np.zeros_like(t.data)
        logp, _ = lm.lm_step(SOS, lm.init_state())
        np.testing.assert_allclose(logp.data, -math.log(7), atol=1e-12)

    def test_log_probs_form_distribution(self):
        lm = M.FusionLm(M.LmConfig(vocab_size=7, embed_dim=4, hidden=5), tiny_vocab(), seed=1)
        logp, _ = lm.lm_step(3, lm.init_state())
        assert abs(np.exp(logp.data).sum() - 1.0) <= 1e-12

    def test_perplexity_decreases_with_training(self):
        rng = np.random.default_rng(9)
        lm = M.FusionLm(M.LmConfig(vocab_size=7, embed_dim=6, hidden=8), tiny_vocab(), seed=2)
        samples = [
            TextSample(f"s{i}", list(rng.integers(3, 7, size=4))) for i in range(8)
        ]
        before = lm.perplexity(samples)
        params = lm.parameters()
        state = {}
        for _ in range(60):
            lm.zero_grads()
            with ad.record():
                ad.backward(lm.lm_loss(samples))
            adam_step(params, state, lr=5e-3)
        assert lm.perplexity(samples) < before


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        model = tiny_model("mute-lt", seed=20)
        model.encode(rng.normal(size=(9, 3)), "train")  # perturb BN stats
        model.set_bn_mode("frozen")
        path = tmp_path / "model.ckpt"
        M.save_model(str(path), model)
        loaded = M.load_model(str(path))
        assert loaded.config == model.config
        assert loaded.vocab.tokens == model.vocab.tokens
        assert loaded.bn_mode == "frozen"
        for (na, _, a), (nb, _, b) in zip(
            sorted(model.state_arrays()), sorted(loaded.state_arrays())
        ):
            assert na == nb
            np.testing.assert_array_equal(a, b)

    def test_rewrite_is_byte_identical(self, tmp_path):
        model = tiny_model("mute-z", seed=21)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        M.save_model(str(p1), model)
        M.save_model(str(p2), model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_lm_roundtrip(self, tmp_path):
        lm = M.FusionLm(M.LmConfig(vocab_size=7, embed_dim=4, hidden=5), tiny_vocab(), seed=3)
        path = tmp_path / "lm.ckpt"
        M.save_model(str(path), lm)
        loaded = M.load_model(str(path))
        assert isinstance(loaded, M.FusionLm)
        logp_a, _ = lm.lm_step(3, lm.init_state())
        logp_b, _ = loaded.lm_step(3, loaded.init_state())
        np.testing.assert_array_equal(logp_a.data, logp_b.data)


class TestFullModelGradients:
    def test_las_loss_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        model = tiny_model("mute-lt", seed=22)
        batch = [tiny_utterance(rng, t=6, u=2), tiny_utterance(rng, t=8, u=3)]
        params = [e.tensor for e in model.registry()]
        stats = [(l.bn.running_mean.copy(), l.bn.running_var.copy()) for l in model.conv]

        def forward():
            out = model.loss_audio_text(batch, "train")
            for layer, (m, v) in zip(model.conv, stats):
                layer.bn.running_mean, layer.bn.running_var = m.copy(), v.copy()
            return out

        check_gradients(forward, params, atol=1e-6, rtol=1e-4)

    def test_text_loss_matches_finite_differences(self):
        model = tiny_model("mute-lt", seed=23)
        model.context.data = np.random.default_rng(12).normal(size=model.context.shape) * 0.3
        batch = [TextSample("a", [3, 4, 5]), TextSample("b", [6, 3])]
        params = [
            e.tensor
            for e in model.registry()
            if e.partition in ("decoder-text", "shared-decoder-io", "learnable-context")
        ]
        check_gradients(lambda: model.loss_text_only(batch), params, atol=1e-6, rtol=1e-4)
