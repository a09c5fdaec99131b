"""Sequence layers: spiking LIF, non-gated RNN, LSTM, batch norm, strided
convolution over time, and the bidirectional wrapper.

All layers run on the autodiff tape. Recurrences unroll step by step; the
per-step feedforward drive (and its batch normalization) is computed for
the whole sequence up front since it does not depend on the recurrent
state.

Padding convention: batched sequences are zero-padded on the right and
accompanied by per-item valid lengths. Padded frames are excluded from
batch-norm statistics and zeroed in layer outputs, and the bidirectional
wrapper reverses only the valid prefix of each item, so padding never
leaks into valid frames in either time direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64
from .tensor import (
    ShapeMismatchError,
    SurrogateSpec,
    Tensor,
    add,
    concat,
    custom_op,
    exp,
    heaviside_surrogate,
    log,
    matmul,
    mul,
    relu,
    sigmoid,
    slice_,
    sub,
    sum as tsum,
    tanh,
    transpose,
)

_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}

# alpha_raw value giving an effective leak of ~0.9 at init
_ALPHA_RAW_INIT = float(np.log(0.9 / 0.1))


def lengths_array(lengths, batch: int, time: int) -> np.ndarray:
    if lengths is None:
        return np.full(batch, time, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,):
        raise ShapeMismatchError(
            f"lengths shape {lengths.shape} does not match batch {batch}")
    if np.any(lengths < 0) or np.any(lengths > time):
        raise ValueError("lengths must lie in [0, time]")
    return lengths


def frame_mask(lengths: np.ndarray, time: int, features: int) -> np.ndarray:
    """[batch, time, features] 0/1 mask of valid frames (read-only view)."""
    valid = np.arange(time)[None, :] < lengths[:, None]
    return np.broadcast_to(valid[:, :, None], (len(lengths), time, features)
                           ).astype(np.float64)


def mask_padding(x: Tensor, lengths: np.ndarray) -> Tensor:
    batch, time, features = x.shape
    if np.all(lengths >= time):
        return x
    return mul(x, Tensor(frame_mask(lengths, time, features)))


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if self.eps <= 0.0:
            raise ValueError("eps must be > 0")
        if np.any(self.running_var < 0.0):
            raise ValueError("running_var must be nonnegative")


def init_batchnorm(features: int, momentum: float = 0.1,
                   eps: float = 1e-5) -> BatchNormState:
    return BatchNormState(
        gamma=Tensor(np.ones(features), requires_grad=True),
        beta=Tensor(np.zeros(features), requires_grad=True),
        running_mean=np.zeros(features),
        running_var=np.ones(features),
        momentum=momentum,
        eps=eps,
    )


def batchnorm_apply(state: BatchNormState, z: Tensor,
                    lengths=None) -> Tensor:
    """Per-feature normalization over all valid (batch, time) frames.

    Train mode uses masked batch statistics and updates the running
    estimates; eval mode uses the running estimates. Padded frames never
    contribute to statistics.
    """
    batch, time, features = z.shape
    lens = lengths_array(lengths, batch, time)
    if state.mode == "train":
        count = float(lens.sum())
        if count < 2:
            raise ValueError("batchnorm needs at least 2 valid frames")
        mask = Tensor(frame_mask(lens, time, features))
        inv_count = Tensor(1.0 / count)
        mean = mul(tsum(mul(z, mask), axis=(0, 1)), inv_count)       # [F]
        centered = sub(z, mean)
        centered_valid = mul(centered, mask)
        var = mul(tsum(mul(centered_valid, centered_valid), axis=(0, 1)),
                  inv_count)                                         # [F]
        # rsqrt via exp/log keeps everything in the primitive vocabulary
        inv_std = exp(mul(Tensor(-0.5), log(add(var, Tensor(state.eps)))))
        out = add(mul(mul(centered, inv_std), state.gamma), state.beta)
        m = state.momentum
        unbias = count / max(count - 1.0, 1.0)
        state.running_mean = (1.0 - m) * state.running_mean + m * mean.values
        state.running_var = (1.0 - m) * state.running_var \
            + m * unbias * var.values
        return out
    if state.mode != "eval":
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")
    scale = Tensor(1.0 / np.sqrt(state.running_var + state.eps))
    centered = sub(z, Tensor(state.running_mean))
    return add(mul(mul(centered, scale), state.gamma), state.beta)


# ---------------------------------------------------------------------------
# spiking and non-gated recurrent layers

@dataclass
class LIFParams:
    """Leaky integrate-and-fire unit bank.

    `W` is the feedforward matrix (out x in, batch-normalized drive), `V`
    the recurrent matrix over previous spikes (out x out), and `alpha_raw`
    the unconstrained per-unit leak; the effective leak sigmoid(alpha_raw)
    stays strictly inside (0, 1) however training moves it.
    """

    W: Tensor
    V: Tensor
    alpha_raw: Tensor
    bn: BatchNormState
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.W.values))
                and np.all(np.isfinite(self.V.values))):
            raise ValueError("LIF weights must be finite")
        out_dim, _ = self.W.shape
        if self.V.shape != (out_dim, out_dim):
            raise ShapeMismatchError(
                f"V shape {self.V.shape} does not match hidden {out_dim}")


@dataclass
class RNNParams:
    W: Tensor
    V: Tensor
    bn: BatchNormState
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _uniform_weights(rng: SplitMix64, out_dim: int, in_dim: int) -> Tensor:
    bound = 1.0 / np.sqrt(in_dim)
    values = rng.uniform_open(-bound, bound, (out_dim, in_dim))
    return Tensor(values, requires_grad=True)


def init_lif(in_dim: int, hidden: int, rng: SplitMix64,
             surrogate: SurrogateSpec | None = None) -> LIFParams:
    return LIFParams(
        W=_uniform_weights(rng, hidden, in_dim),
        V=_uniform_weights(rng, hidden, hidden),
        alpha_raw=Tensor(np.full(hidden, _ALPHA_RAW_INIT),
                         requires_grad=True),
        bn=init_batchnorm(hidden),
        surrogate=surrogate or SurrogateSpec(),
    )


def init_rnn(in_dim: int, hidden: int, rng: SplitMix64,
             activation: str = "relu") -> RNNParams:
    return RNNParams(
        W=_uniform_weights(rng, hidden, in_dim),
        V=_uniform_weights(rng, hidden, hidden),
        bn=init_batchnorm(hidden),
        activation=activation,
    )


def lif_forward(params: LIFParams, x: Tensor, lengths=None,
                want_potentials: bool = False,
                detach_reset: bool = False):
    """Unroll the spiking dynamics over a [batch, time, in] sequence.

    Per step: the drive is the batch-normalized feedforward term plus the
    recurrent term over the previous step's spikes; the membrane potential
    leaks toward the new drive, softly reset by the previous spike; a spike
    fires wherever the potential reaches threshold. Output is exactly
    binary. `detach_reset` blocks the gradient path through the reset term
    (the recurrent drive path always carries gradient).
    """
    batch, time, in_dim = x.shape
    if in_dim != params.W.shape[1]:
        raise ShapeMismatchError(
            f"lif_forward: input dim {in_dim} vs W {params.W.shape}")
    drive = batchnorm_apply(params.bn, matmul(x, transpose(params.W)),
                            lengths)
    v_t = transpose(params.V)
    alpha = sigmoid(params.alpha_raw)              # [H], in (0, 1)
    leak_in = sub(Tensor(1.0), alpha)
    spikes: list[Tensor] = []
    potentials: list[Tensor] = []
    u_prev: Tensor | None = None
    s_prev: Tensor | None = None
    for t in range(time):
        z_t = slice_(drive, (slice(None), slice(t, t + 1)))    # [B,1,H]
        if s_prev is None:
            current = z_t
            u = mul(leak_in, current)
        else:
            current = add(z_t, matmul(s_prev, v_t))
            reset = s_prev.detach() if detach_reset else s_prev
            u = add(mul(alpha, sub(u_prev, reset)), mul(leak_in, current))
        s = heaviside_surrogate(u, params.surrogate)
        spikes.append(s)
        potentials.append(u)
        u_prev, s_prev = u, s
    out = concat(spikes, axis=1)
    if lengths is not None:
        out = mask_padding(out, lengths_array(lengths, batch, time))
    if want_potentials:
        return out, concat(potentials, axis=1)
    return out


def rnn_forward(params: RNNParams, x: Tensor, lengths=None) -> Tensor:
    """Non-gated recurrent layer: activation of drive plus recurrence over
    the previous real-valued output."""
    batch, time, in_dim = x.shape
    if in_dim != params.W.shape[1]:
        raise ShapeMismatchError(
            f"rnn_forward: input dim {in_dim} vs W {params.W.shape}")
    g = _ACTIVATIONS[params.activation]
    drive = batchnorm_apply(params.bn, matmul(x, transpose(params.W)),
                            lengths)
    v_t = transpose(params.V)
    outputs: list[Tensor] = []
    y_prev: Tensor | None = None
    for t in range(time):
        z_t = slice_(drive, (slice(None), slice(t, t + 1)))
        pre = z_t if y_prev is None else add(z_t, matmul(y_prev, v_t))
        y_prev = g(pre)
        outputs.append(y_prev)
    out = concat(outputs, axis=1)
    if lengths is not None:
        out = mask_padding(out, lengths_array(lengths, batch, time))
    return out


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LSTMParams:
    """Standard LSTM cell weights; `U*` act on the previous hidden state."""

    Wi: Tensor
    Ui: Tensor
    bi: Tensor
    Wf: Tensor
    Uf: Tensor
    bf: Tensor
    Wg: Tensor
    Ug: Tensor
    bg: Tensor
    Wo: Tensor
    Uo: Tensor
    bo: Tensor

    def __post_init__(self):
        hidden = self.Wi.shape[0]
        for name in ("Wi", "Ui", "bi", "Wf", "Uf", "bf",
                     "Wg", "Ug", "bg", "Wo", "Uo", "bo"):
            t = getattr(self, name)
            if t.shape[0] != hidden:
                raise ShapeMismatchError(
                    f"LSTM parameter {name} rows {t.shape} != hidden {hidden}")


def init_lstm(in_dim: int, hidden: int, rng: SplitMix64) -> LSTMParams:
    def w():
        return _uniform_weights(rng, hidden, in_dim)

    def u():
        return _uniform_weights(rng, hidden, hidden)

    def b():
        return Tensor(np.zeros(hidden), requires_grad=True)

    return LSTMParams(Wi=w(), Ui=u(), bi=b(), Wf=w(), Uf=u(), bf=b(),
                      Wg=w(), Ug=u(), bg=b(), Wo=w(), Uo=u(), bo=b())


def lstm_forward(params: LSTMParams, x: Tensor, lengths=None) -> Tensor:
    batch, time, in_dim = x.shape
    if in_dim != params.Wi.shape[1]:
        raise ShapeMismatchError(
            f"lstm_forward: input dim {in_dim} vs Wi {params.Wi.shape}")
    zi = add(matmul(x, transpose(params.Wi)), params.bi)
    zf = add(matmul(x, transpose(params.Wf)), params.bf)
    zg = add(matmul(x, transpose(params.Wg)), params.bg)
    zo = add(matmul(x, transpose(params.Wo)), params.bo)
    ui_t, uf_t = transpose(params.Ui), transpose(params.Uf)
    ug_t, uo_t = transpose(params.Ug), transpose(params.Uo)
    outputs: list[Tensor] = []
    h_prev: Tensor | None = None
    c_prev: Tensor | None = None
    key = lambda t: (slice(None), slice(t, t + 1))  # noqa: E731
    for t in range(time):
        if h_prev is None:
            gi = sigmoid(slice_(zi, key(t)))
            gf = sigmoid(slice_(zf, key(t)))
            gg = tanh(slice_(zg, key(t)))
            go = sigmoid(slice_(zo, key(t)))
            c = mul(gi, gg)
        else:
            gi = sigmoid(add(slice_(zi, key(t)), matmul(h_prev, ui_t)))
            gf = sigmoid(add(slice_(zf, key(t)), matmul(h_prev, uf_t)))
            gg = tanh(add(slice_(zg, key(t)), matmul(h_prev, ug_t)))
            go = sigmoid(add(slice_(zo, key(t)), matmul(h_prev, uo_t)))
            c = add(mul(gf, c_prev), mul(gi, gg))
        h = mul(go, tanh(c))
        outputs.append(h)
        h_prev, c_prev = h, c
    out = concat(outputs, axis=1)
    if lengths is not None:
        out = mask_padding(out, lengths_array(lengths, batch, time))
    return out


# ---------------------------------------------------------------------------
# time convolution front-end

@dataclass
class ConvParams:
    kernel: Tensor   # [channels, width, in_features]
    bias: Tensor     # [channels]
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def init_conv(in_dim: int, channels: int, width: int, stride: int,
              rng: SplitMix64) -> ConvParams:
    bound = 1.0 / np.sqrt(width * in_dim)
    kernel = Tensor(rng.uniform_open(-bound, bound, (channels, width, in_dim)),
                    requires_grad=True)
    bias = Tensor(np.zeros(channels), requires_grad=True)
    return ConvParams(kernel=kernel, bias=bias, stride=stride)


def conv_output_length(length, width: int, stride: int):
    return (length - width) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution along time. x: [B,T,F], kernel: [C,K,F]."""
    batch, time, features = x.shape
    channels, width, kf = kernel.shape
    if kf != features:
        raise ShapeMismatchError(
            f"conv1d: kernel features {kf} vs input {features}")
    if time < width:
        raise ShapeMismatchError(
            f"conv1d: input time {time} shorter than kernel width {width}")
    out_time = conv_output_length(time, width, stride)
    windows = np.lib.stride_tricks.sliding_window_view(
        x.values, width, axis=1)[:, ::stride]          # [B,T',F,K]
    kv = kernel.values
    out = np.einsum("btfk,ckf->btc", windows, kv, optimize=True)

    def backward(g):
        gk = np.einsum("btc,btfk->ckf", g, windows, optimize=True)
        gx = np.zeros_like(x.values)
        for k in range(width):
            gx[:, k:k + stride * out_time:stride] += np.einsum(
                "btc,cf->btf", g, kv[:, k, :], optimize=True)
        return gx, gk

    return custom_op("conv1d", (x, kernel), out, backward)


def conv_front_end(params: ConvParams, x: Tensor, lengths=None):
    """Convolution + relu time pooling. Returns (output, output lengths)."""
    batch, time, _ = x.shape
    lens = lengths_array(lengths, batch, time)
    if np.any(lens < params.kernel.shape[1]):
        raise ShapeMismatchError(
            "conv_front_end: an item is shorter than the kernel width")
    out = relu(add(conv1d(x, params.kernel, params.stride), params.bias))
    new_lens = conv_output_length(lens, params.kernel.shape[1], params.stride)
    out = mask_padding(out, new_lens)
    return out, new_lens


# ---------------------------------------------------------------------------
# bidirectional wrapper

def reverse_sequence(x: Tensor, lengths=None) -> Tensor:
    """Reverse each item's valid prefix in time; padded tail stays put.

    The index map is an involution, so the backward pass is the same
    gather applied to the incoming gradient.
    """
    batch, time, _ = x.shape
    lens = lengths_array(lengths, batch, time)
    steps = np.arange(time)[None, :]
    idx = np.where(steps < lens[:, None], lens[:, None] - 1 - steps, steps)
    rows = np.arange(batch)[:, None]
    out = x.values[rows, idx]

    def backward(g):
        return (g[rows, idx],)

    return custom_op("reverse_sequence", (x,), out, backward)


def run_bidirectional(layer_fn, params_fwd, params_bwd, x: Tensor,
                      lengths=None, **kwargs) -> Tensor:
    """Run `layer_fn` forward and on time-reversed input, concatenating the
    two hidden sequences on the feature axis."""
    fwd = layer_fn(params_fwd, x, lengths, **kwargs)
    rev_in = reverse_sequence(x, lengths)
    rev_out = layer_fn(params_bwd, rev_in, lengths, **kwargs)
    bwd = reverse_sequence(rev_out, lengths)
    return concat([fwd, bwd], axis=2)


# ---------------------------------------------------------------------------
# single-neuron simulation (plain floats, no tape)

def simulate_neuron(input_current: np.ndarray, alpha: float,
                    threshold: float = 1.0, recurrent: float = 0.0):
    """Integrate one spiking unit over a given stimulus trace.

    Returns (stimulus, potential, spikes) arrays of equal length, where
    stimulus includes the recurrent feedback term.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    steps = len(input_current)
    stim = np.zeros(steps)
    potential = np.zeros(steps)
    spikes = np.zeros(steps)
    u_prev = 0.0
    s_prev = 0.0
    for t in range(steps):
        stim[t] = input_current[t] + recurrent * s_prev
        u = alpha * (u_prev - s_prev) + (1.0 - alpha) * stim[t]
        potential[t] = u
        spikes[t] = 1.0 if u >= threshold else 0.0
        u_prev, s_prev = u, spikes[t]
    return stim, potential, spikes
