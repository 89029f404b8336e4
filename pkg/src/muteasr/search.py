"""Inference: greedy and beam-search decoding, n-best extraction, and
shallow fusion with an external language model.

Scores are cumulative log-probabilities; with fusion each step contributes
``log p_asr + lm_weight * log p_lm``.  Hypotheses are ranked by
``score / length**length_norm`` with ties broken toward the
lexicographically smaller token sequence, so decoding is fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, PAD, SOS, Vocabulary
from .errors import ContractError, DimensionError, ParseError
from .model import DecoderState, FusionLm, LasModel


@dataclass
class FusionConfig:
    lm_weight: float = 0.3
    length_norm: float = 0.0

    def __post_init__(self):
        if self.lm_weight < 0:
            raise ContractError(f"lm weight must be >= 0, got {self.lm_weight}")
        if self.length_norm < 0:
            raise ContractError(f"length-normalization exponent must be >= 0, got {self.length_norm}")


@dataclass
class Hypothesis:
    """A scored token sequence (content tokens only; sos/eos/pad excluded).

    ``finished`` is true iff the sequence ended with the end-of-sequence
    token, whose emission score is then included.  ``asr_scores`` and
    ``lm_scores`` hold the per-step components of ``score``.
    """

    tokens: list[int] = field(default_factory=list)
    score: float = 0.0
    finished: bool = False
    asr_scores: list[float] = field(default_factory=list)
    lm_scores: list[float] = field(default_factory=list)

    @property
    def asr_score(self) -> float:
        return float(sum(self.asr_scores))

    @property
    def lm_score(self) -> float:
        return float(sum(self.lm_scores))

    def normalized_score(self, length_norm: float) -> float:
        if length_norm == 0.0:
            return self.score
        return self.score / max(1, len(self.tokens)) ** length_norm


def fuse_step(asr_logprobs: np.ndarray, lm_logprobs: np.ndarray, lm_weight: float) -> np.ndarray:
    """Combine per-token scores: ``log p_asr + weight * log p_lm``.

    With weight 0 the recognizer scores are returned unchanged (bit-exact).
    """
    if asr_logprobs.shape != lm_logprobs.shape:
        raise DimensionError(
            f"fuse_step: score lengths {asr_logprobs.shape} and {lm_logprobs.shape} differ"
        )
    if lm_weight == 0.0:
        return asr_logprobs.copy()
    return asr_logprobs + lm_weight * lm_logprobs


@dataclass
class _Beam:
    hyp: Hypothesis
    state: DecoderState
    lm_state: Optional[DecoderState]
    prev_token: int


def _sort_key(hyp: Hypothesis, length_norm: float):
    return (-hyp.normalized_score(length_norm), tuple(hyp.tokens))


def beam_search(
    model: LasModel,
    features: Optional[np.ndarray],
    width: int,
    max_len: int,
    fusion: Optional[tuple[FusionLm, FusionConfig]] = None,
    enc: Optional[Tensor] = None,
) -> list[Hypothesis]:
    """Beam decoding over the audio path -> at most ``width`` hypotheses, sorted.

    Reserved tokens other than end-of-sequence are never expanded.  Live
    hypotheses remaining at ``max_len`` are closed unfinished.  ``enc`` may
    carry a precomputed encoding of ``features``.
    """
    if width < 1 or max_len < 1:
        raise ContractError("beam width and max length must be >= 1")
    lm = fusion[0] if fusion else None
    fuse_cfg = fusion[1] if fusion else FusionConfig(lm_weight=0.0)
    if lm is not None and lm.vocab.tokens != model.vocab.tokens:
        raise ContractError("recognizer and language model vocabularies differ")

    if enc is None:
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ContractError("beam_search: empty feature input")
        enc = model.encode(feats, "eval")
    keys_proj = model.attention.project_keys(enc)
    v = model.config.vocab_size
    blocked = np.zeros(v)
    blocked[[PAD, SOS]] = -np.inf

    beams = [
        _Beam(
            hyp=Hypothesis(),
            state=model.init_state(),
            lm_state=lm.init_state() if lm else None,
            prev_token=SOS,
        )
    ]
    finished: list[Hypothesis] = []

    for _ in range(max_len):
        candidates: list[_Beam] = []
        for beam in beams:
            logits, state, _ = model._audio_step([beam.prev_token], beam.state, enc, keys_proj)
            asr_logp = ad.log_softmax_row(logits).data.reshape(-1)
            lm_state = beam.lm_state
            if lm is not None:
                lm_logp_t, lm_state = lm.lm_step(beam.prev_token, beam.lm_state)
                lm_logp = lm_logp_t.data
                combined = fuse_step(asr_logp, lm_logp, fuse_cfg.lm_weight) + blocked
            else:
                lm_logp = np.zeros(v)
                combined = asr_logp + blocked
            order = np.argsort(combined)[::-1][: width + 1]
            for tok in order:
                tok = int(tok)
                if not np.isfinite(combined[tok]):
                    continue
                hyp = Hypothesis(
                    tokens=beam.hyp.tokens + ([] if tok == EOS else [tok]),
                    score=beam.hyp.score + combined[tok],
                    finished=tok == EOS,
                    asr_scores=beam.hyp.asr_scores + [float(asr_logp[tok])],
                    lm_scores=beam.hyp.lm_scores + [float(lm_logp[tok])],
                )
                candidates.append(_Beam(hyp=hyp, state=state, lm_state=lm_state, prev_token=tok))
        candidates.sort(key=lambda b: _sort_key(b.hyp, 0.0))
        beams = []
        for cand in candidates:
            if cand.hyp.finished:
                finished.append(cand.hyp)
            elif len(beams) < width:
                beams.append(cand)
        if not beams:
            break
    for beam in beams:
        finished.append(beam.hyp)  # forcibly closed at max-len, still unfinished

    finished.sort(key=lambda h: _sort_key(h, fuse_cfg.length_norm))
    return finished[:width]


def greedy_decode(
    model: LasModel,
    features: Optional[np.ndarray],
    max_len: int,
    enc: Optional[Tensor] = None,
) -> Hypothesis:
    """Argmax decoding step by step until end-of-sequence or ``max_len``."""
    if max_len < 1:
        raise ContractError("greedy_decode: max length must be >= 1")
    if enc is None:
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ContractError("greedy_decode: empty feature input")
        enc = model.encode(feats, "eval")
    keys_proj = model.attention.project_keys(enc)
    blocked = np.zeros(model.config.vocab_size)
    blocked[[PAD, SOS]] = -np.inf
    state = model.init_state()
    hyp = Hypothesis()
    prev = SOS
    for _ in range(max_len):
        logits, state, _ = model._audio_step([prev], state, enc, keys_proj)
        logp = ad.log_softmax_row(logits).data.reshape(-1) + blocked
        tok = int(np.argmax(logp))
        hyp.score += float(logp[tok])
        hyp.asr_scores.append(float(logp[tok]))
        hyp.lm_scores.append(0.0)
        if tok == EOS:
            hyp.finished = True
            break
        hyp.tokens.append(tok)
        prev = tok
    return hyp


# ---------------------------------------------------------------------------
# n-best file format


def write_nbest(path: str, nbests: dict[str, list[Hypothesis]], vocab: Vocabulary) -> None:
    """One tab-separated record per hypothesis:
    utterance-id, rank, score, asr-score, lm-score, token string."""
    with open(path, "w") as fh:
        for utt_id, hyps in nbests.items():
            for rank, h in enumerate(hyps):
                words = " ".join(vocab.to_words(h.tokens))
                fh.write(
                    f"{utt_id}\t{rank}\t{h.score:.6f}\t{h.asr_score:.6f}\t{h.lm_score:.6f}\t{words}\n"
                )


def read_nbest(path: str) -> dict[str, list[dict]]:
    """Parse an n-best file back into per-utterance hypothesis records."""
    out: dict[str, list[dict]] = {}
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.rstrip("\n"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise ParseError(f"{path}:{i}: expected 6 tab-separated fields, got {len(parts)}")
            utt_id, rank, score, asr_score, lm_score, words = parts
            try:
                rec = {
                    "rank": int(rank),
                    "score": float(score),
                    "asr_score": float(asr_score),
                    "lm_score": float(lm_score),
                    "words": words.split(),
                }
            except ValueError:
                raise ParseError(f"{path}:{i}: malformed numeric field") from None
            out.setdefault(utt_id, []).append(rec)
    for utt_id, recs in out.items():
        ranks = [r["rank"] for r in recs]
        if ranks != list(range(len(recs))):
            raise ParseError(f"{path}: ranks for {utt_id} are not consecutive from 0")
    return out
