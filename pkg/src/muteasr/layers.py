"""Parameterized layers: LSTM cells, bidirectional stacks, conv+batchnorm,
content-based attention, token embedding, and output projection.

All layers are plain parameter containers plus pure functions over
:class:`~muteasr.autodiff.Tensor`; training mutates parameter data through
the optimizer only.  Batched entry points take [b x d] matrices; the
single-vector operations documented below are thin wrappers with b = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

BN_EPS = 1e-5

# Gate order is fixed as (input, forget, cell-candidate, output); the forget
# gate bias starts at 1.0 to keep early cell states alive at small scale.
FORGET_BIAS_INIT = 1.0


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


@dataclass
class LstmCellParams:
    """Weights of one LSTM cell: input-to-gates [4h x d], hidden-to-gates
    [4h x h], gate biases [4h]."""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int) -> "LstmCellParams":
        w_x = uniform_init(rng, (4 * hidden_size, input_size), hidden_size)
        w_h = uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size)
        b = np.zeros(4 * hidden_size)
        b[hidden_size : 2 * hidden_size] = FORGET_BIAS_INIT
        return cls(Tensor.param(w_x), Tensor.param(w_h), Tensor.param(b))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("wx", self.w_x), ("wh", self.w_h), ("bias", self.bias)]


def lstm_cell_batch(
    params: LstmCellParams, x: Tensor, h: Tensor, c: Tensor
) -> tuple[Tensor, Tensor]:
    """One recurrence step for a batch: x [b x d], h and c [b x h]."""
    z = ad.add(ad.linear(x, params.w_x, params.bias), ad.linear(h, params.w_h))
    return ad.lstm_gates(z, c)


def lstm_cell_step(
    params: LstmCellParams, x: Tensor, h: Tensor, c: Tensor
) -> tuple[Tensor, Tensor]:
    """Single-vector LSTM step: x [d], h and c [h] -> (h', c')."""
    for name, t in (("x", x), ("h", h), ("c", c)):
        if t.data.ndim != 1:
            raise DimensionError(f"lstm_cell_step: {name} must be a vector, got {t.shape}")
    h2, c2 = lstm_cell_batch(
        params,
        ad.reshape(x, (1, x.shape[0])),
        ad.reshape(h, (1, h.shape[0])),
        ad.reshape(c, (1, c.shape[0])),
    )
    n = params.hidden_size
    return ad.reshape(h2, (n,)), ad.reshape(c2, (n,))


def _run_lstm_direction(
    params: LstmCellParams, x: Tensor, reverse: bool
) -> Tensor:
    """Run one direction over [t x d]; returns hidden states [t x h] in input order."""
    t_len = x.shape[0]
    h_size = params.hidden_size
    # The input projection of every frame comes from a single matmul; the
    # per-step work is only the recurrent half.
    zx = ad.linear(x, params.w_x, params.bias)
    h = Tensor(np.zeros((1, h_size)))
    c = Tensor(np.zeros((1, h_size)))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outputs: list[Optional[Tensor]] = [None] * t_len
    for t in order:
        z = ad.add(ad.slice_rows(zx, t, t + 1), ad.linear(h, params.w_h))
        h, c = ad.lstm_gates(z, c)
        outputs[t] = h
    return ad.concat_rows(outputs)


def run_bilstm(layers: Sequence[tuple[LstmCellParams, LstmCellParams]], x: Tensor) -> Tensor:
    """Stacked bidirectional LSTM over [t x f] -> [t x 2h].

    Each layer is a (forward, backward) cell pair; per frame the two
    directions' hidden states are concatenated before feeding the next layer.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"run_bilstm: need a nonempty [t x f] input, got shape {x.shape}")
    out = x
    for fwd, bwd in layers:
        out = ad.concat_cols(
            [_run_lstm_direction(fwd, out, reverse=False), _run_lstm_direction(bwd, out, reverse=True)]
        )
    return out


@dataclass
class BatchNormState:
    """Per-channel batch normalization with freezable running statistics.

    ``mode`` is one of ``train`` / ``eval`` / ``frozen``; the latter two are
    mathematically identical (running statistics normalize and are never
    written) but are kept distinct so second-stage training can be asserted
    to run frozen.
    """

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: str = "train"

    VALID_MODES = ("train", "eval", "frozen")

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ContractError(f"batchnorm momentum must be in (0, 1], got {self.momentum}")
        if (self.running_var < 0).any():
            raise ContractError("batchnorm running variance must be nonnegative")

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            scale=Tensor.param(np.ones(channels)),
            shift=Tensor.param(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
        )

    def set_mode(self, mode: str) -> None:
        if mode not in self.VALID_MODES:
            raise ContractError(f"unknown batchnorm mode {mode!r}")
        self.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "train":
            y, mean, var = ad.batchnorm_train(x, self.scale, self.shift, eps=BN_EPS)
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
            return y
        return ad.channel_affine(
            x, self.scale, self.shift, self.running_mean, self.running_var, eps=BN_EPS
        )


@dataclass
class ConvLayer:
    """1-D convolution over time with channel mixing, then batchnorm and relu."""

    weight: Tensor  # [channels x (kernel * in_dim)]
    bias: Tensor  # [channels]
    bn: BatchNormState
    kernel: int
    stride: int

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        channels: int,
        kernel: int = 3,
        stride: int = 2,
        bn_momentum: float = 0.1,
    ) -> "ConvLayer":
        w = uniform_init(rng, (channels, kernel * in_dim), kernel * in_dim)
        return cls(
            weight=Tensor.param(w),
            bias=Tensor.param(np.zeros(channels)),
            bn=BatchNormState.init(channels, momentum=bn_momentum),
            kernel=kernel,
            stride=stride,
        )

    def out_len(self, t: int) -> int:
        pad = self.kernel // 2
        return (t + 2 * pad - self.kernel) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] < self.kernel:
            raise ContractError(
                f"conv input of {x.shape[0]} frames is shorter than kernel width {self.kernel}"
            )
        win = ad.time_windows(x, self.kernel, self.stride, pad=self.kernel // 2)
        y = ad.linear(win, self.weight, self.bias)
        return ad.relu(self.bn.forward(y))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w", self.weight),
            ("b", self.bias),
            ("bn.scale", self.bn.scale),
            ("bn.shift", self.bn.shift),
        ]


def conv_bn_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    """Convolution + batchnorm + relu over [t x f]; mode comes from the layer's BN state."""
    return layer.forward(x)


@dataclass
class AttentionParams:
    """Additive (content-based) attention: e_t = v . tanh(Wq q + Wk k_t)."""

    w_query: Tensor  # [a x h_dec]
    w_key: Tensor  # [a x h_enc]
    v: Tensor  # [a]

    @classmethod
    def init(
        cls, rng: np.random.Generator, query_size: int, key_size: int, attn_size: int
    ) -> "AttentionParams":
        return cls(
            w_query=Tensor.param(uniform_init(rng, (attn_size, query_size), query_size)),
            w_key=Tensor.param(uniform_init(rng, (attn_size, key_size), key_size)),
            v=Tensor.param(uniform_init(rng, (attn_size,), attn_size)),
        )

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("wq", self.w_query), ("wk", self.w_key), ("v", self.v)]

    def project_keys(self, keys: Tensor) -> Tensor:
        """Precompute Wk . keys once per utterance; reused by every step."""
        return ad.linear(keys, self.w_key)


def attention_with_projected_keys(
    params: AttentionParams, query: Tensor, keys: Tensor, keys_proj: Tensor
) -> tuple[Tensor, Tensor]:
    """Attention step with ``keys_proj`` already computed.

    query is a [1 x h_dec] row; returns (context [1 x h_enc], weights [1 x t]).
    """
    q = ad.linear(query, params.w_query)
    scores = ad.matmul(
        ad.tanh(ad.add(keys_proj, q)), ad.reshape(params.v, (params.v.shape[0], 1))
    )
    weights = ad.softmax_row(ad.reshape(scores, (1, keys.shape[0])))
    context = ad.matmul(weights, keys)
    return context, weights


def attention_step(
    params: AttentionParams, query: Tensor, keys: Tensor
) -> tuple[Tensor, Tensor]:
    """Content-based attention: query [h_dec], keys [t x h_enc] -> (context [h_enc], weights [t])."""
    if keys.data.ndim != 2 or keys.shape[0] < 1:
        raise ContractError(f"attention_step: need nonempty [t x h] keys, got shape {keys.shape}")
    if query.data.ndim != 1:
        raise DimensionError(f"attention_step: query must be a vector, got {query.shape}")
    context, weights = attention_with_projected_keys(
        params, ad.reshape(query, (1, query.shape[0])), keys, params.project_keys(keys)
    )
    return ad.reshape(context, (keys.shape[1],)), ad.reshape(weights, (keys.shape[0],))


def embed(table: Tensor, token: int) -> Tensor:
    """Row lookup of one token id -> [e]."""
    return ad.reshape(ad.embed_rows(table, [token]), (table.shape[1],))


def project(w: Tensor, h: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine projection of a hidden vector [h] to vocabulary logits [v]."""
    if h.data.ndim != 1:
        raise DimensionError(f"project: hidden state must be a vector, got {h.shape}")
    out = ad.linear(ad.reshape(h, (1, h.shape[0])), w, bias)
    return ad.reshape(out, (w.shape[0],))
