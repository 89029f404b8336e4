"""Two-stage training pipeline: full-model stage 1, then encoder-frozen
stage 2 with stochastic audio-text / text-only batch mixing.

Determinism contract: (seed, config, corpora) fully determine every step.
One generator drives the whole run -- per step it draws the batch type
(stage 2), then the batch indices -- and its bit-generator state is part of
the resumable training state, so an interrupted run continues on the exact
trajectory of an uninterrupted one.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .corpus import TextSample, Utterance
from .errors import ContractError, PartitionError
from .model import FusionLm, LasModel, PARTITIONS, save_model
from .scoring import align
from .search import greedy_decode

AUDIO_TEXT = "audio-text"
TEXT_ONLY = "text-only"

STAGE2_PARTITIONS = tuple(p for p in PARTITIONS if p != "encoder")


@dataclass
class TrainConfig:
    stage: int
    steps: int
    mixing_ratio: float = 0.0
    learning_rate: float = 1e-3
    ema_decay: float = 0.999
    audio_batch: int = 4
    text_batch: int = 16
    seed: int = 0
    eval_every: int = 50
    checkpoint_every: int = 0  # 0 disables periodic state checkpoints
    optimizer: str = "adam"
    clip_norm: float = 5.0
    reinit_decoder: bool = True
    max_decode_len: int = 0  # 0: derive from validation transcripts

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ContractError(f"stage must be 1 or 2, got {self.stage}")
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ContractError(f"mixing ratio must lie in [0, 1], got {self.mixing_ratio}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ContractError(f"ema decay must lie in [0, 1), got {self.ema_decay}")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise ContractError("step count must be nonnegative")


class OptimizerState:
    """Per-parameter adaptive-moment (or plain SGD) state keyed by registry name."""

    def __init__(
        self,
        kind: str = "adam",
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update_param(self, name: str, tensor: Tensor, grad: np.ndarray) -> None:
        if self.kind == "sgd":
            tensor.data = tensor.data - self.lr * grad
            return
        m = self.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            self.v[name] = np.zeros_like(tensor.data)
            self.t[name] = 0
        v = self.v[name]
        t = self.t[name] + 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name], self.t[name] = m, v, t
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def apply_update(model, optimizer: OptimizerState, allowed: Sequence[str], clip_norm: float = 0.0) -> None:
    """Optimizer step restricted to ``allowed`` partitions.

    A nonzero gradient on a disallowed partition is a :class:`PartitionError`:
    gradient masking and the update allowlist must agree.
    """
    allowed = set(allowed)
    updates = []
    for entry in model.registry():
        grad = entry.tensor.grad
        if grad is None:
            continue
        if entry.partition not in allowed:
            if np.any(grad):
                raise PartitionError(
                    f"gradient on frozen partition {entry.partition!r} ({entry.name})"
                )
            continue
        updates.append((entry.name, entry.tensor, grad))
    clip_gradients([g for _, _, g in updates], clip_norm)
    for name, tensor, grad in updates:
        optimizer.update_param(name, tensor, grad)


class EmaState:
    """Exponential moving average of the trained partitions; evaluation reads the shadow."""

    def __init__(self, model, decay: float, partitions: Sequence[str]):
        if not 0.0 <= decay < 1.0:
            raise ContractError(f"ema decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.partitions = set(partitions)
        self.shadow: dict[str, np.ndarray] = {
            e.name: e.tensor.data.copy()
            for e in model.registry()
            if e.partition in self.partitions
        }

    def update(self, model) -> None:
        d = self.decay
        for e in model.registry():
            if e.name in self.shadow:
                self.shadow[e.name] = d * self.shadow[e.name] + (1.0 - d) * e.tensor.data

    @contextlib.contextmanager
    def eval_view(self, model):
        """Temporarily swap shadowed parameters into the model."""
        saved = {}
        for e in model.registry():
            if e.name in self.shadow:
                saved[e.name] = e.tensor.data
                e.tensor.data = self.shadow[e.name]
        try:
            yield model
        finally:
            for e in model.registry():
                if e.name in saved:
                    e.tensor.data = saved[e.name]


def ema_update(ema: EmaState, model) -> None:
    ema.update(model)


def sample_batch_type(rng: np.random.Generator, ratio: float) -> str:
    """Bernoulli(ratio) draw: text-only with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mixing ratio must lie in [0, 1], got {ratio}")
    return TEXT_ONLY if rng.random() < ratio else AUDIO_TEXT


def validation_wer(
    model: LasModel,
    validation: Sequence[Utterance],
    max_len: int,
    encodings: Optional[Sequence] = None,
) -> float:
    """Greedy-decode WER over a validation split (summed counts)."""
    errors = total = 0
    for i, utt in enumerate(validation):
        enc = encodings[i] if encodings is not None else None
        hyp = greedy_decode(model, utt.features, max_len=max_len, enc=enc)
        ref = model.vocab.to_words(utt.transcript)
        a = align(ref, model.vocab.to_words(hyp.tokens))
        errors += a.errors
        total += a.ref_len
    return errors / total if total else 0.0


LOG_COLUMNS = (
    "step",
    "stage",
    "ratio",
    "audio_loss",
    "text_loss",
    "audio_steps",
    "text_steps",
    "val_wer",
    "best",
)


def format_log_line(step, stage, ratio, audio_loss, text_loss, audio_steps, text_steps, val_wer, best):
    def num(x):
        return "nan" if x is None else f"{x:.6f}"

    return (
        f"{step}\t{stage}\t{ratio:.2f}\t{num(audio_loss)}\t{num(text_loss)}"
        f"\t{audio_steps}\t{text_steps}\t{val_wer:.6f}\t{int(best)}"
    )


@dataclass
class TrainResult:
    model: LasModel
    config: TrainConfig
    best_metric: float
    best_arrays: dict[str, np.ndarray]
    log_lines: list[str]
    steps_done: int

    def apply_best(self) -> LasModel:
        """Load the best-on-validation (EMA) weights into the model."""
        for e in self.model.registry():
            e.tensor.data = self.best_arrays[e.name].copy()
        for i, layer in enumerate(self.model.conv):
            layer.bn.running_mean = self.best_arrays[f"encoder.conv{i}.bn.running_mean"].copy()
            layer.bn.running_var = self.best_arrays[f"encoder.conv{i}.bn.running_var"].copy()
        return self.model

    def write_log(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
            for line in self.log_lines:
                fh.write(line + "\n")


def reinit_decoder_for_stage2(model: LasModel, seed: int, reinit: bool = True) -> LasModel:
    """Freeze the encoder and (by default) re-draw all decoder-side parameters.

    Encoder parameters and batchnorm statistics stay bit-identical; batchnorm
    switches to frozen mode so second-stage forward passes read fixed
    statistics.
    """
    if reinit:
        model.reinit_decoder(seed)
    model.set_bn_mode("frozen")
    model.set_partition_trainable("encoder", False)
    return model


def _snapshot_eval_arrays(model: LasModel, ema: EmaState) -> dict[str, np.ndarray]:
    with ema.eval_view(model):
        return {name: arr.copy() for name, _, arr in model.state_arrays()}


def _train_loop(
    model: LasModel,
    cfg: TrainConfig,
    validation: Sequence[Utterance],
    allowed: Sequence[str],
    draw_batch: Callable[[np.random.Generator], tuple[str, Tensor]],
    resume: Optional[dict] = None,
    state_path: Optional[str] = None,
    val_encodings: Optional[Sequence] = None,
) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    optimizer = OptimizerState(kind=cfg.optimizer, lr=cfg.learning_rate)
    ema = EmaState(model, cfg.ema_decay, allowed)
    max_len = cfg.max_decode_len or (max((len(u.transcript) for u in validation), default=8) + 3)

    start_step = 0
    best_metric = np.inf
    best_arrays = _snapshot_eval_arrays(model, ema)
    log_lines: list[str] = []
    audio_steps = text_steps = 0
    window_audio: list[float] = []
    window_text: list[float] = []

    if resume is not None:
        _restore_training_state(model, optimizer, ema, rng, resume)
        start_step = resume["step"]
        best_metric = resume["best_metric"]
        best_arrays = resume["best_arrays"]
        log_lines = list(resume["log_lines"])
        audio_steps, text_steps = resume["audio_steps"], resume["text_steps"]

    def evaluate(step: int) -> None:
        nonlocal best_metric, best_arrays
        with ema.eval_view(model):
            wer = validation_wer(model, validation, max_len, encodings=val_encodings)
        is_best = wer < best_metric
        if is_best:
            best_metric = wer
            best_arrays = _snapshot_eval_arrays(model, ema)
        log_lines.append(
            format_log_line(
                step,
                cfg.stage,
                cfg.mixing_ratio,
                float(np.mean(window_audio)) if window_audio else None,
                float(np.mean(window_text)) if window_text else None,
                audio_steps,
                text_steps,
                wer,
                is_best,
            )
        )
        window_audio.clear()
        window_text.clear()

    for step in range(start_step + 1, cfg.steps + 1):
        kind, loss_fn = draw_batch(rng)
        model.zero_grads()
        with ad.record():
            loss = loss_fn()
            ad.backward(loss)
        apply_update(model, optimizer, allowed, cfg.clip_norm)
        ema.update(model)
        if kind == AUDIO_TEXT:
            audio_steps += 1
            window_audio.append(float(loss.data))
        else:
            text_steps += 1
            window_text.append(float(loss.data))
        if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
            evaluate(step)
        if state_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            _save_training_state(
                state_path, model, cfg, optimizer, ema, rng, step,
                best_metric, best_arrays, log_lines, audio_steps, text_steps,
            )

    evaluate(cfg.steps)
    if state_path and cfg.checkpoint_every:
        _save_training_state(
            state_path, model, cfg, optimizer, ema, rng, cfg.steps,
            best_metric, best_arrays, log_lines, audio_steps, text_steps,
        )
    return TrainResult(
        model=model,
        config=cfg,
        best_metric=best_metric,
        best_arrays=best_arrays,
        log_lines=log_lines,
        steps_done=cfg.steps,
    )


def _draw_indices(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=min(batch, n), replace=False)


def train_stage1(
    model: LasModel,
    train: Sequence[Utterance],
    validation: Sequence[Utterance],
    cfg: TrainConfig,
    resume: Optional[dict] = None,
    state_path: Optional[str] = None,
) -> TrainResult:
    """Stage 1: train the whole model on audio-text pairs (batchnorm in train mode)."""
    if cfg.stage != 1:
        raise ContractError("train_stage1 requires a stage-1 config")
    if not train:
        raise ContractError("train_stage1: empty paired corpus")
    train = list(train)

    def draw_batch(rng):
        idx = _draw_indices(rng, len(train), cfg.audio_batch)
        examples = [train[i] for i in idx]
        return AUDIO_TEXT, lambda: model.loss_audio_text(examples, "train")

    return _train_loop(model, cfg, validation, PARTITIONS, draw_batch, resume, state_path)


def train_stage2(
    model: LasModel,
    paired: Sequence[Utterance],
    text: Sequence[TextSample],
    validation: Sequence[Utterance],
    cfg: TrainConfig,
    resume: Optional[dict] = None,
    state_path: Optional[str] = None,
) -> TrainResult:
    """Stage 2: retrain the decoder with per-step stochastic batch-type mixing.

    The encoder partition is never updated and batchnorm statistics stay
    frozen; homogeneous batches come from the corpus matching the drawn type.
    """
    if cfg.stage != 2:
        raise ContractError("train_stage2 requires a stage-2 config")
    if not paired:
        raise ContractError("train_stage2: empty paired corpus")
    if cfg.mixing_ratio > 0 and model.config.variant == "baseline":
        raise ContractError("baseline variant cannot take text-only steps (mixing ratio > 0)")
    if cfg.mixing_ratio > 0 and not text:
        raise ContractError("train_stage2: mixing ratio > 0 needs a text corpus")
    if model.bn_mode != "frozen":
        raise ContractError("stage 2 requires frozen batchnorm; run reinit_decoder_for_stage2 first")
    paired = list(paired)
    text = list(text)

    # The encoder (including batchnorm statistics) is frozen, so per-utterance
    # encodings are constants of the run; compute them once.
    paired_enc = model.encode_batch([u.features for u in paired], "frozen")
    val_enc = model.encode_batch([u.features for u in validation], "frozen") if validation else None

    def draw_batch(rng):
        kind = sample_batch_type(rng, cfg.mixing_ratio)
        if kind == TEXT_ONLY:
            idx = _draw_indices(rng, len(text), cfg.text_batch)
            examples = [text[i] for i in idx]
            return TEXT_ONLY, lambda: model.loss_text_only(examples)
        idx = _draw_indices(rng, len(paired), cfg.audio_batch)
        examples = [paired[i] for i in idx]
        encodings = [paired_enc[i] for i in idx]
        return AUDIO_TEXT, lambda: model.loss_audio_text(examples, "frozen", encodings=encodings)

    return _train_loop(
        model, cfg, validation, STAGE2_PARTITIONS, draw_batch, resume, state_path,
        val_encodings=val_enc,
    )


# ---------------------------------------------------------------------------
# resumable training state


TRAIN_STATE_FORMAT = 1


def _save_training_state(
    path, model, cfg, optimizer, ema, rng, step, best_metric, best_arrays, log_lines,
    audio_steps, text_steps,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, _, data in model.state_arrays():
        arrays[f"param/{name}"] = data
    for name, m in optimizer.m.items():
        arrays[f"opt.m/{name}"] = m
        arrays[f"opt.v/{name}"] = optimizer.v[name]
    for name, shadow in ema.shadow.items():
        arrays[f"ema/{name}"] = shadow
    for name, data in best_arrays.items():
        arrays[f"best/{name}"] = data
    meta = {
        "format": TRAIN_STATE_FORMAT,
        "step": step,
        "best_metric": best_metric,
        "opt_t": optimizer.t,
        "rng_state": json.dumps(rng.bit_generator.state),
        "log_lines": log_lines,
        "audio_steps": audio_steps,
        "text_steps": text_steps,
        "config": asdict(cfg),
        "bn_modes": [layer.bn.mode for layer in model.conv],
    }
    ckpt.write_container(path, meta, arrays)


def load_training_state(path: str) -> dict:
    meta, arrays = ckpt.read_container(path)
    state = {
        "step": meta["step"],
        "best_metric": meta["best_metric"],
        "opt_t": {k: int(v) for k, v in meta["opt_t"].items()},
        "rng_state": json.loads(meta["rng_state"]),
        "log_lines": meta["log_lines"],
        "audio_steps": meta["audio_steps"],
        "text_steps": meta["text_steps"],
        "config": meta["config"],
        "bn_modes": meta["bn_modes"],
        "params": {},
        "opt_m": {},
        "opt_v": {},
        "ema": {},
        "best_arrays": {},
    }
    for key, arr in arrays.items():
        group, name = key.split("/", 1)
        target = {
            "param": "params",
            "opt.m": "opt_m",
            "opt.v": "opt_v",
            "ema": "ema",
            "best": "best_arrays",
        }[group]
        state[target][name] = arr
    return state


def _restore_training_state(model, optimizer, ema, rng, state) -> None:
    from .model import restore_arrays

    restore_arrays(model, state["params"])
    for layer, mode in zip(model.conv, state["bn_modes"]):
        layer.bn.set_mode(mode)
    optimizer.m = dict(state["opt_m"])
    optimizer.v = dict(state["opt_v"])
    optimizer.t = dict(state["opt_t"])
    ema.shadow = dict(state["ema"])
    rng.bit_generator.state = state["rng_state"]


# ---------------------------------------------------------------------------
# fusion language model training


@dataclass
class LmTrainConfig:
    steps: int = 600
    learning_rate: float = 1e-3
    batch: int = 16
    seed: int = 0
    eval_every: int = 100
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.steps < 0:
            raise ContractError("invalid lm training config")


def train_lm(
    lm: FusionLm,
    text: Sequence[TextSample],
    validation: Sequence[TextSample],
    cfg: LmTrainConfig,
) -> tuple[FusionLm, list[str], float]:
    """Train the fusion LM; keeps the best-on-validation-perplexity weights."""
    if not text:
        raise ContractError("train_lm: empty text corpus")
    text = list(text)
    rng = np.random.default_rng(cfg.seed)
    optimizer = OptimizerState(kind="adam", lr=cfg.learning_rate)
    best_ppl = np.inf
    best_arrays = {name: arr.copy() for name, _, arr in lm.state_arrays()}
    log_lines = []
    window: list[float] = []

    def evaluate(step):
        nonlocal best_ppl, best_arrays
        ppl = lm.perplexity(validation) if validation else np.inf
        is_best = ppl < best_ppl
        if is_best:
            best_ppl = ppl
            best_arrays = {name: arr.copy() for name, _, arr in lm.state_arrays()}
        loss = float(np.mean(window)) if window else float("nan")
        log_lines.append(f"{step}\t{loss:.6f}\t{ppl:.6f}\t{int(is_best)}")
        window.clear()

    for step in range(1, cfg.steps + 1):
        idx = _draw_indices(rng, len(text), cfg.batch)
        lm.zero_grads()
        with ad.record():
            loss = lm.lm_loss([text[i] for i in idx])
            ad.backward(loss)
        grads = [t.grad for t in lm.parameters() if t.grad is not None]
        clip_gradients(grads, cfg.clip_norm)
        for e in lm.registry():
            if e.tensor.grad is not None:
                optimizer.update_param(e.name, e.tensor, e.tensor.grad)
        window.append(float(loss.data))
        if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
            evaluate(step)
    evaluate(cfg.steps)
    for e in lm.registry():
        e.tensor.data = best_arrays[e.name].copy()
    return lm, log_lines, best_ppl
