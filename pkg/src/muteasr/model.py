"""Encoder-decoder transcription model with the four text-context decoder
variants, plus the external fusion language model.

The decoder owns a parameter registry that partitions every trainable tensor
into one of: encoder, decoder-audio, decoder-text, shared-decoder-io
(embedding + output projection), attention, learnable-context.  The two-stage
trainer and several tests rely on this partition being exact.

Variants (``ModelConfig.variant``):

* ``baseline``  -- audio path only; no text-only loss.
* ``mute-z``    -- text steps run the full decoder with an all-zero context
  substituted for the attention context.
* ``mute-l``    -- like ``mute-z`` but the substitute context is a trained
  vector shared across steps and examples.
* ``mute-zt`` / ``mute-lt`` -- text steps run only the top decoder layers
  (index >= ``text_split``); the token embedding (concatenated with the
  zero/learned context) enters the top stack through a dedicated entry
  projection that belongs to the text partition.

On the audio path all five variants compute exactly the same function for
the same shared parameters: the attention context is injected only at the
bottom decoder layer, below any text split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .corpus import EOS, PAD, SOS, PaddedBatch, TextSample, Utterance, Vocabulary
from .errors import ContractError, DimensionError
from .layers import (
    AttentionParams,
    ConvLayer,
    LstmCellParams,
    attention_with_projected_keys,
    lstm_cell_batch,
    run_bilstm,
    uniform_init,
)

VARIANTS = ("baseline", "mute-z", "mute-l", "mute-zt", "mute-lt")
SPLIT_VARIANTS = ("mute-zt", "mute-lt")
LEARNED_CONTEXT_VARIANTS = ("mute-l", "mute-lt")

PARTITIONS = (
    "encoder",
    "decoder-audio",
    "decoder-text",
    "shared-decoder-io",
    "attention",
    "learnable-context",
)


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    conv_layers: int = 2
    conv_channels: int = 16
    conv_kernel: int = 3
    conv_stride: int = 2
    encoder_layers: int = 1
    encoder_hidden: int = 16
    decoder_layers: int = 2
    decoder_hidden: int = 32
    embed_dim: int = 16
    attention_dim: int = 16
    variant: str = "baseline"
    text_split: int = 1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown decoder variant {self.variant!r}")
        if self.variant in SPLIT_VARIANTS and not 1 <= self.text_split < self.decoder_layers:
            raise ContractError(
                f"text split {self.text_split} must satisfy 1 <= k < {self.decoder_layers}"
            )
        if self.vocab_size < 4:
            raise ContractError("vocabulary must contain at least one content token")

    @property
    def encoder_out_dim(self) -> int:
        return 2 * self.encoder_hidden

    @classmethod
    def desk(cls, vocab_size: int = 19, feature_dim: int = 8, **overrides) -> "ModelConfig":
        return cls(vocab_size=vocab_size, feature_dim=feature_dim, **overrides)

    @classmethod
    def paper_large(cls, vocab_size: int, feature_dim: int = 80, **overrides) -> "ModelConfig":
        """Full-scale sizes: 2 conv layers, 4x1024 BiLSTM, 4x1024 decoder."""
        base = dict(
            conv_layers=2,
            conv_channels=32,
            encoder_layers=4,
            encoder_hidden=1024,
            decoder_layers=4,
            decoder_hidden=1024,
            embed_dim=1024,
            attention_dim=512,
            text_split=2,
        )
        base.update(overrides)
        return cls(vocab_size=vocab_size, feature_dim=feature_dim, **base)


@dataclass
class RegistryEntry:
    name: str
    partition: str
    tensor: Tensor


@dataclass
class DecoderState:
    """Per-layer (h, c) rows [b x h]; ``layers[0].h`` doubles as the attention query."""

    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def zeros(cls, n_layers: int, hidden: int, batch: int = 1) -> "DecoderState":
        return cls(
            [
                (Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))
                for _ in range(n_layers)
            ]
        )


class LasModel:
    """Conv+BN encoder, BiLSTM stack, attention decoder with variant-tagged text path."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        if len(vocab) != config.vocab_size:
            raise ContractError(
                f"vocabulary size {len(vocab)} does not match config {config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self._init_encoder(rng)
        self._init_decoder(rng)

    # -- construction -------------------------------------------------------

    def _init_encoder(self, rng: np.random.Generator) -> None:
        cfg = self.config
        self.conv: list[ConvLayer] = []
        in_dim = cfg.feature_dim
        for _ in range(cfg.conv_layers):
            self.conv.append(
                ConvLayer.init(
                    rng,
                    in_dim,
                    cfg.conv_channels,
                    kernel=cfg.conv_kernel,
                    stride=cfg.conv_stride,
                    bn_momentum=cfg.bn_momentum,
                )
            )
            in_dim = cfg.conv_channels
        self.enc_lstm: list[tuple[LstmCellParams, LstmCellParams]] = []
        for _ in range(cfg.encoder_layers):
            self.enc_lstm.append(
                (
                    LstmCellParams.init(rng, in_dim, cfg.encoder_hidden),
                    LstmCellParams.init(rng, in_dim, cfg.encoder_hidden),
                )
            )
            in_dim = cfg.encoder_out_dim

    def _init_decoder(self, rng: np.random.Generator) -> None:
        """(Re)draw all decoder-side parameters; order is fixed so variants that
        share a parameter subset draw identical values from the same seed."""
        cfg = self.config
        self.embedding = Tensor.param(
            uniform_init(rng, (cfg.vocab_size, cfg.embed_dim), cfg.embed_dim)
        )
        self.dec_cells: list[LstmCellParams] = []
        in_dim = cfg.embed_dim + cfg.encoder_out_dim
        for _ in range(cfg.decoder_layers):
            self.dec_cells.append(LstmCellParams.init(rng, in_dim, cfg.decoder_hidden))
            in_dim = cfg.decoder_hidden
        self.attention = AttentionParams.init(
            rng, cfg.decoder_hidden, cfg.encoder_out_dim, cfg.attention_dim
        )
        self.out_w = Tensor.param(
            uniform_init(rng, (cfg.vocab_size, cfg.decoder_hidden), cfg.decoder_hidden)
        )
        self.out_b = Tensor.param(np.zeros(cfg.vocab_size))
        self.text_in_w = self.text_in_b = None
        if cfg.variant in SPLIT_VARIANTS:
            entry_dim = cfg.embed_dim + cfg.encoder_out_dim
            self.text_in_w = Tensor.param(
                uniform_init(rng, (cfg.decoder_hidden, entry_dim), entry_dim)
            )
            self.text_in_b = Tensor.param(np.zeros(cfg.decoder_hidden))
        self.context = None
        if cfg.variant in LEARNED_CONTEXT_VARIANTS:
            # Zero init makes mute-l coincide with mute-z at initialization.
            self.context = Tensor.param(np.zeros(cfg.encoder_out_dim))

    def reinit_decoder(self, seed: int) -> None:
        self._init_decoder(np.random.default_rng(seed))

    # -- registry -----------------------------------------------------------

    def registry(self) -> list[RegistryEntry]:
        cfg = self.config
        entries = []
        for i, layer in enumerate(self.conv):
            for suffix, t in layer.tensors():
                entries.append(RegistryEntry(f"encoder.conv{i}.{suffix}", "encoder", t))
        for i, (fwd, bwd) in enumerate(self.enc_lstm):
            for tag, cell in (("fwd", fwd), ("bwd", bwd)):
                for suffix, t in cell.tensors():
                    entries.append(RegistryEntry(f"encoder.lstm{i}.{tag}.{suffix}", "encoder", t))
        split = cfg.text_split if cfg.variant in SPLIT_VARIANTS else cfg.decoder_layers
        for i, cell in enumerate(self.dec_cells):
            part = "decoder-audio" if i < split else "decoder-text"
            for suffix, t in cell.tensors():
                entries.append(RegistryEntry(f"decoder.cell{i}.{suffix}", part, t))
        if self.text_in_w is not None:
            entries.append(RegistryEntry("decoder.text_in.w", "decoder-text", self.text_in_w))
            entries.append(RegistryEntry("decoder.text_in.b", "decoder-text", self.text_in_b))
        entries.append(RegistryEntry("decoder.embedding", "shared-decoder-io", self.embedding))
        entries.append(RegistryEntry("decoder.out.w", "shared-decoder-io", self.out_w))
        entries.append(RegistryEntry("decoder.out.b", "shared-decoder-io", self.out_b))
        for suffix, t in self.attention.tensors():
            entries.append(RegistryEntry(f"attention.{suffix}", "attention", t))
        if self.context is not None:
            entries.append(RegistryEntry("decoder.context", "learnable-context", self.context))
        return entries

    def state_arrays(self) -> list[tuple[str, str, np.ndarray]]:
        """Registry data plus (non-trainable) batchnorm running statistics."""
        out = [(e.name, e.partition, e.tensor.data) for e in self.registry()]
        for i, layer in enumerate(self.conv):
            out.append((f"encoder.conv{i}.bn.running_mean", "encoder", layer.bn.running_mean))
            out.append((f"encoder.conv{i}.bn.running_var", "encoder", layer.bn.running_var))
        return out

    def partition_hash(self, partition: str) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, part, data in sorted(self.state_arrays()):
            if part == partition:
                h.update(name.encode())
                h.update(np.ascontiguousarray(data).tobytes())
        return h.hexdigest()

    def parameters(self) -> list[Tensor]:
        return [e.tensor for e in self.registry()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def set_partition_trainable(self, partition: str, trainable: bool) -> None:
        for e in self.registry():
            if e.partition == partition:
                e.tensor.requires_grad = trainable

    def set_bn_mode(self, mode: str) -> None:
        for layer in self.conv:
            layer.bn.set_mode(mode)

    @property
    def bn_mode(self) -> str:
        return self.conv[0].bn.mode if self.conv else "train"

    # -- forward passes ------------------------------------------------------

    def min_frames(self) -> int:
        """Smallest input length every conv layer accepts."""
        t = 1
        for layer in reversed(self.conv):
            t = max(layer.kernel, (t - 1) * layer.stride + layer.kernel - 2 * (layer.kernel // 2))
        return t

    def encode(self, features: Union[np.ndarray, Tensor], bn_mode: str) -> Tensor:
        """Conv+BN stack (in ``bn_mode``) then BiLSTM stack -> [t' x enc_out]."""
        return self.encode_batch([features], bn_mode)[0]

    def encode_batch(
        self, features_list: Sequence[Union[np.ndarray, Tensor]], bn_mode: str
    ) -> list[Tensor]:
        """Encode several utterances; train-mode batch statistics are computed
        over the concatenated frames of the whole batch (one running-stat
        update per conv layer per call)."""
        xs = []
        for features in features_list:
            x = features if isinstance(features, Tensor) else Tensor(features)
            if x.data.ndim != 2 or x.shape[1] != self.config.feature_dim:
                raise ContractError(
                    f"encode: features must be [t x {self.config.feature_dim}], got {x.shape}"
                )
            xs.append(x)
        self.set_bn_mode(bn_mode)
        for layer in self.conv:
            for x in xs:
                if x.shape[0] < layer.kernel:
                    raise ContractError(
                        f"conv input of {x.shape[0]} frames is shorter than kernel width {layer.kernel}"
                    )
            raw = [
                ad.linear(
                    ad.time_windows(x, layer.kernel, layer.stride, pad=layer.kernel // 2),
                    layer.weight,
                    layer.bias,
                )
                for x in xs
            ]
            joint = ad.concat_rows(raw) if len(raw) > 1 else raw[0]
            normed = layer.bn.forward(joint)
            out = []
            ofs = 0
            for r in raw:
                t = r.shape[0]
                part = ad.slice_rows(normed, ofs, ofs + t) if len(raw) > 1 else normed
                out.append(ad.relu(part))
                ofs += t
            xs = out
        return [run_bilstm(self.enc_lstm, x) for x in xs]

    def init_state(self, batch: int = 1) -> DecoderState:
        return DecoderState.zeros(self.config.decoder_layers, self.config.decoder_hidden, batch)

    def _run_cells(
        self, x: Tensor, state: DecoderState, start: int = 0
    ) -> tuple[Tensor, DecoderState]:
        new_layers = list(state.layers)
        for i in range(start, self.config.decoder_layers):
            h, c = lstm_cell_batch(self.dec_cells[i], x, *state.layers[i])
            new_layers[i] = (h, c)
            x = h
        return x, DecoderState(new_layers)

    def _audio_step(
        self,
        tokens: Sequence[int],
        state: DecoderState,
        enc: Tensor,
        keys_proj: Tensor,
    ) -> tuple[Tensor, DecoderState, Tensor]:
        emb = ad.embed_rows(self.embedding, tokens)
        context, weights = attention_with_projected_keys(
            self.attention, state.layers[0][0], enc, keys_proj
        )
        top, new_state = self._run_cells(ad.concat_cols([emb, context]), state)
        logits = ad.linear(top, self.out_w, self.out_b)
        return logits, new_state, weights

    def decode_step_audio(
        self, prev_token: int, state: DecoderState, enc: Tensor
    ) -> tuple[Tensor, DecoderState, Tensor]:
        """One audio-path step -> (logits [v], new state, attention weights [t'])."""
        if prev_token >= self.config.vocab_size:
            raise IndexError(f"token {prev_token} out of range for vocab {self.config.vocab_size}")
        if len(state.layers) != self.config.decoder_layers:
            raise ContractError("decoder state layer count does not match config")
        logits, new_state, weights = self._audio_step(
            [prev_token], state, enc, self.attention.project_keys(enc)
        )
        return (
            ad.reshape(logits, (self.config.vocab_size,)),
            new_state,
            ad.reshape(weights, (enc.shape[0],)),
        )

    def _text_context(self, batch: int) -> Tensor:
        if self.context is not None:
            return ad.tile_rows(self.context, batch)
        return Tensor(np.zeros((batch, self.config.encoder_out_dim)))

    def _text_step(
        self, tokens: Sequence[int], state: DecoderState
    ) -> tuple[Tensor, DecoderState]:
        cfg = self.config
        emb = ad.embed_rows(self.embedding, tokens)
        entry = ad.concat_cols([emb, self._text_context(len(tokens))])
        if cfg.variant in SPLIT_VARIANTS:
            x = ad.linear(entry, self.text_in_w, self.text_in_b)
            top, new_state = self._run_cells(x, state, start=cfg.text_split)
        else:
            top, new_state = self._run_cells(entry, state)
        return ad.linear(top, self.out_w, self.out_b), new_state

    def decode_step_text(
        self, prev_token: int, state: DecoderState
    ) -> tuple[Tensor, DecoderState]:
        """One text-path step -> (logits [v], new state); invalid on the baseline variant."""
        if self.config.variant == "baseline":
            raise ContractError("baseline variant has no text-only path")
        if prev_token >= self.config.vocab_size:
            raise IndexError(f"token {prev_token} out of range for vocab {self.config.vocab_size}")
        logits, new_state = self._text_step([prev_token], state)
        return ad.reshape(logits, (self.config.vocab_size,)), new_state

    # -- losses ---------------------------------------------------------------

    def loss_audio_text(
        self,
        examples: Union[Sequence[Utterance], PaddedBatch],
        bn_mode: str,
        encodings: Optional[Sequence[Tensor]] = None,
    ) -> Tensor:
        """Teacher-forced cross-entropy, averaged per utterance then over the batch.

        ``encodings`` may carry precomputed encoder states (one per example);
        legitimate only while the encoder and its batchnorm statistics are
        frozen, where they are constants of the run.
        """
        if isinstance(examples, PaddedBatch):
            if examples.kind != "audio-text":
                raise ContractError("loss_audio_text needs paired examples")
            examples = examples.examples
        examples = list(examples)
        if not examples:
            raise ContractError("loss_audio_text: empty batch")
        for utt in examples:
            if not isinstance(utt, Utterance):
                raise ContractError(f"example {getattr(utt, 'id', '?')} has no features")
        if encodings is None:
            encodings = self.encode_batch([u.features for u in examples], bn_mode)
        # All utterances step in lockstep; attention runs as one fused node
        # over the concatenated encoder states.
        keys_all = ad.concat_rows(encodings) if len(encodings) > 1 else encodings[0]
        offsets = np.cumsum([0] + [e.shape[0] for e in encodings]).tolist()
        b = len(examples)

        def step_fn(tokens, state):
            emb = ad.embed_rows(self.embedding, tokens)
            q_proj = ad.linear(state.layers[0][0], self.attention.w_query)
            keys_proj = ad.linear(keys_all, self.attention.w_key)
            context, _ = ad.additive_attention(
                q_proj, self.attention.v, keys_all, keys_proj, offsets
            )
            top, new_state = self._run_cells(ad.concat_cols([emb, context]), state)
            return ad.linear(top, self.out_w, self.out_b), new_state

        return _lockstep_nll(examples, step_fn, self.init_state(b))

    def loss_text_only(self, examples: Union[Sequence[TextSample], PaddedBatch]) -> Tensor:
        """Next-token cross-entropy through the text path, batched in lockstep."""
        if self.config.variant == "baseline":
            raise ContractError("baseline variant has no text-only loss")
        if isinstance(examples, PaddedBatch):
            if examples.kind != "text-only":
                raise ContractError("loss_text_only needs text-only examples")
            examples = examples.examples
        examples = list(examples)
        if not examples:
            raise ContractError("loss_text_only: empty batch")
        for s in examples:
            if isinstance(s, Utterance):
                raise ContractError("loss_text_only batch must contain text-only examples")
        return _lockstep_nll(examples, self._text_step, self.init_state(len(examples)))

    def greedy_logits_fn(self):
        return self._audio_step


def _lockstep_nll(examples, step_fn, state) -> Tensor:
    """Shared next-token loss over padded rows: per-example mean, then batch mean."""
    b = len(examples)
    lengths = [len(e.transcript) + 1 for e in examples]  # targets include eos
    u_max = max(lengths)
    inputs = np.full((b, u_max), PAD, dtype=np.int64)
    targets = np.full((b, u_max), PAD, dtype=np.int64)
    weights = np.zeros((u_max, b))
    for i, e in enumerate(examples):
        seq = list(e.transcript)
        inputs[i, : len(seq) + 1] = [SOS] + seq
        targets[i, : len(seq)] = seq
        targets[i, len(seq)] = EOS
        weights[: lengths[i], i] = 1.0 / (lengths[i] * b)
    step_logits = []
    for u in range(u_max):
        logits, state = step_fn(inputs[:, u], state)
        step_logits.append(logits)
    flat_targets = np.concatenate([targets[:, u] for u in range(u_max)])
    return ad.token_nll(ad.concat_rows(step_logits), flat_targets, weights.reshape(-1))


# ---------------------------------------------------------------------------
# fusion language model


@dataclass
class LmConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden: int = 48
    layers: int = 1

    @classmethod
    def paper_lm(cls, vocab_size: int) -> "LmConfig":
        return cls(vocab_size=vocab_size, embed_dim=1024, hidden=2048, layers=2)


class FusionLm:
    """Unidirectional LSTM language model over the same vocabulary as the recognizer."""

    def __init__(self, config: LmConfig, vocab: Vocabulary, seed: int = 0):
        if len(vocab) != config.vocab_size:
            raise ContractError("lm vocabulary size does not match config")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.embedding = Tensor.param(
            uniform_init(rng, (config.vocab_size, config.embed_dim), config.embed_dim)
        )
        self.cells = []
        in_dim = config.embed_dim
        for _ in range(config.layers):
            self.cells.append(LstmCellParams.init(rng, in_dim, config.hidden))
            in_dim = config.hidden
        self.out_w = Tensor.param(
            uniform_init(rng, (config.vocab_size, config.hidden), config.hidden)
        )
        self.out_b = Tensor.param(np.zeros(config.vocab_size))

    def registry(self) -> list[RegistryEntry]:
        entries = [RegistryEntry("lm.embedding", "lm", self.embedding)]
        for i, cell in enumerate(self.cells):
            for suffix, t in cell.tensors():
                entries.append(RegistryEntry(f"lm.cell{i}.{suffix}", "lm", t))
        entries.append(RegistryEntry("lm.out.w", "lm", self.out_w))
        entries.append(RegistryEntry("lm.out.b", "lm", self.out_b))
        return entries

    def state_arrays(self) -> list[tuple[str, str, np.ndarray]]:
        return [(e.name, e.partition, e.tensor.data) for e in self.registry()]

    def parameters(self) -> list[Tensor]:
        return [e.tensor for e in self.registry()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def init_state(self, batch: int = 1) -> DecoderState:
        return DecoderState.zeros(self.config.layers, self.config.hidden, batch)

    def _step(self, tokens: Sequence[int], state: DecoderState) -> tuple[Tensor, DecoderState]:
        x = ad.embed_rows(self.embedding, tokens)
        new_layers = list(state.layers)
        for i, cell in enumerate(self.cells):
            h, c = lstm_cell_batch(cell, x, *state.layers[i])
            new_layers[i] = (h, c)
            x = h
        return ad.linear(x, self.out_w, self.out_b), DecoderState(new_layers)

    def lm_step(self, prev_token: int, state: DecoderState) -> tuple[Tensor, DecoderState]:
        """One step -> (log-probabilities [v], new state)."""
        if prev_token >= self.config.vocab_size:
            raise IndexError(f"token {prev_token} out of range for vocab {self.config.vocab_size}")
        logits, new_state = self._step([prev_token], state)
        return ad.reshape(ad.log_softmax_row(logits), (self.config.vocab_size,)), new_state

    def lm_loss(self, examples: Sequence[TextSample]) -> Tensor:
        examples = list(examples)
        if not examples:
            raise ContractError("lm_loss: empty batch")
        return _lockstep_nll(examples, self._step, self.init_state(len(examples)))

    def perplexity(self, examples: Sequence[TextSample]) -> float:
        """Corpus perplexity: exp of total nll over total predicted tokens."""
        total_nll = 0.0
        total_tokens = 0
        for s in examples:
            n = len(s.transcript) + 1
            loss = self.lm_loss([s])
            total_nll += float(loss.data) * n
            total_tokens += n
        return float(np.exp(total_nll / total_tokens))


# ---------------------------------------------------------------------------
# checkpoints


CKPT_FORMAT = 1


def _bn_modes(model: LasModel) -> list[str]:
    return [layer.bn.mode for layer in model.conv]


def save_model(path: str, model: Union[LasModel, FusionLm], extra_meta: Optional[dict] = None) -> None:
    """Write a bit-exact checkpoint: config, vocabulary, and all state arrays."""
    is_lm = isinstance(model, FusionLm)
    meta = {
        "format": CKPT_FORMAT,
        "kind": "lm" if is_lm else "las",
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
    }
    if not is_lm:
        meta["bn_modes"] = _bn_modes(model)
    if extra_meta:
        meta.update(extra_meta)
    ckpt.write_container(path, meta, {name: data for name, _, data in model.state_arrays()})


def load_model(path: str) -> Union[LasModel, FusionLm]:
    meta, arrays = ckpt.read_container(path)
    vocab = Vocabulary(tuple(meta["vocab"]))
    if meta["kind"] == "lm":
        model: Union[LasModel, FusionLm] = FusionLm(LmConfig(**meta["config"]), vocab)
    else:
        model = LasModel(ModelConfig(**meta["config"]), vocab)
    restore_arrays(model, arrays)
    if meta["kind"] == "las":
        for layer, mode in zip(model.conv, meta.get("bn_modes", [])):
            layer.bn.set_mode(mode)
    return model


def restore_arrays(model: Union[LasModel, FusionLm], arrays: dict) -> None:
    expected = {name for name, _, _ in model.state_arrays()}
    missing = expected - set(arrays)
    if missing:
        raise ContractError(f"checkpoint is missing arrays: {sorted(missing)[:3]}...")
    for e in model.registry():
        e.tensor.data = np.ascontiguousarray(arrays[e.name])
    if isinstance(model, LasModel):
        for i, layer in enumerate(model.conv):
            layer.bn.running_mean = np.ascontiguousarray(arrays[f"encoder.conv{i}.bn.running_mean"])
            layer.bn.running_var = np.ascontiguousarray(arrays[f"encoder.conv{i}.bn.running_var"])
