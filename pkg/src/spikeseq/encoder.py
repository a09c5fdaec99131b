"""Encoder assembly: conv front-end, a configurable recurrent stack
(spiking LIF / non-gated RNN / LSTM, each optionally bidirectional), and a
linear head with log-softmax over the output vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .rng import SplitMix64
from .tensor import Tensor, add, log_softmax, matmul, transpose

LAYER_KINDS = ("lif", "rnn", "lstm")


@dataclass(frozen=True)
class ConvSpec:
    channels: int = 32
    width: int = 3
    stride: int = 2


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hidden: int
    bidirectional: bool = True


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    conv: ConvSpec
    layers: tuple[LayerSpec, ...]
    vocab_size: int          # includes the blank id 0
    rnn_activation: str = "relu"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one recurrent layer")
        for spec in self.layers:
            if spec.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if spec.hidden < 1:
                raise ValueError("hidden size must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab must hold the blank plus >= 1 token")
        if self.input_dim < 1 or self.conv.channels < 1:
            raise ValueError("feature dims must be positive")


def _layer_out_dim(spec: LayerSpec) -> int:
    return spec.hidden * (2 if spec.bidirectional else 1)


class EncoderParams:
    """Structured parameters for one encoder instance."""

    def __init__(self, config: EncoderConfig, conv: L.ConvParams,
                 stack: list[tuple], out_w: Tensor, out_b: Tensor):
        self.config = config
        self.conv = conv
        self.stack = stack          # list of (spec, fwd_params, bwd_params)
        self.out_w = out_w
        self.out_b = out_b

    # -- flattening ---------------------------------------------------------

    def _named_items(self):
        yield "conv.kernel", self.conv.kernel
        yield "conv.bias", self.conv.bias
        for i, (spec, fwd, bwd) in enumerate(self.stack):
            directions = [("fwd", fwd)] + ([("bwd", bwd)] if bwd else [])
            for tag, p in directions:
                prefix = f"layer{i}.{tag}"
                if spec.kind == "lstm":
                    for name in ("Wi", "Ui", "bi", "Wf", "Uf", "bf",
                                 "Wg", "Ug", "bg", "Wo", "Uo", "bo"):
                        yield f"{prefix}.{name}", getattr(p, name)
                else:
                    yield f"{prefix}.W", p.W
                    yield f"{prefix}.V", p.V
                    if spec.kind == "lif":
                        yield f"{prefix}.alpha_raw", p.alpha_raw
                    yield f"{prefix}.bn.gamma", p.bn.gamma
                    yield f"{prefix}.bn.beta", p.bn.beta
        yield "out.W", self.out_w
        yield "out.b", self.out_b

    def trainable(self) -> dict[str, Tensor]:
        return dict(self._named_items())

    def _bn_states(self):
        for i, (spec, fwd, bwd) in enumerate(self.stack):
            if spec.kind == "lstm":
                continue
            yield f"layer{i}.fwd.bn", fwd.bn
            if bwd is not None:
                yield f"layer{i}.bwd.bn", bwd.bn

    def set_mode(self, mode: str) -> None:
        for _, bn in self._bn_states():
            bn.mode = mode

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.values for name, t in self._named_items()}
        for prefix, bn in self._bn_states():
            out[f"{prefix}.running_mean"] = bn.running_mean
            out[f"{prefix}.running_var"] = bn.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._named_items():
            src = arrays[name]
            if src.shape != t.values.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {src.shape}, "
                    f"expected {t.values.shape}")
            t.values = src.astype(np.float64).copy()
        for prefix, bn in self._bn_states():
            bn.running_mean = arrays[f"{prefix}.running_mean"].copy()
            bn.running_var = arrays[f"{prefix}.running_var"].copy()


def _init_layer(spec: LayerSpec, in_dim: int, config: EncoderConfig,
                rng: SplitMix64):
    if spec.kind == "lif":
        return L.init_lif(in_dim, spec.hidden, rng)
    if spec.kind == "rnn":
        return L.init_rnn(in_dim, spec.hidden, rng, config.rnn_activation)
    return L.init_lstm(in_dim, spec.hidden, rng)


def init_encoder(config: EncoderConfig, rng: SplitMix64) -> EncoderParams:
    conv = L.init_conv(config.input_dim, config.conv.channels,
                       config.conv.width, config.conv.stride, rng)
    stack: list[tuple] = []
    in_dim = config.conv.channels
    for spec in config.layers:
        fwd = _init_layer(spec, in_dim, config, rng)
        bwd = _init_layer(spec, in_dim, config, rng) \
            if spec.bidirectional else None
        stack.append((spec, fwd, bwd))
        in_dim = _layer_out_dim(spec)
    bound = 1.0 / np.sqrt(in_dim)
    out_w = Tensor(rng.uniform_open(-bound, bound,
                                    (config.vocab_size, in_dim)),
                   requires_grad=True)
    out_b = Tensor(np.zeros(config.vocab_size), requires_grad=True)
    return EncoderParams(config, conv, stack, out_w, out_b)


_FORWARD_FNS = {
    "lif": L.lif_forward,
    "rnn": L.rnn_forward,
    "lstm": L.lstm_forward,
}


def _valid_mean(values: np.ndarray, lens: np.ndarray) -> float:
    batch, time, features = values.shape
    valid = (np.arange(time)[None, :] < lens[:, None]).astype(np.float64)
    total = float(lens.sum()) * features
    if total == 0:
        return 0.0
    return float((values * valid[:, :, None]).sum() / total)


def encoder_forward(params: EncoderParams, x: Tensor, lengths=None):
    """Full encoder pass.

    Returns (log_probs [batch, out_time, vocab], out_lengths, aux) where
    aux carries per-spiking-layer firing rates measured on valid frames.
    """
    config = params.config
    h, lens = L.conv_front_end(params.conv, x, lengths)
    aux = {"spike_rate": {}}
    for i, (spec, fwd, bwd) in enumerate(params.stack):
        fn = _FORWARD_FNS[spec.kind]
        if spec.bidirectional:
            h = L.run_bidirectional(fn, fwd, bwd, h, lens)
        else:
            h = fn(fwd, h, lens)
        if spec.kind == "lif":
            aux["spike_rate"][f"layer{i}"] = _valid_mean(h.values, lens)
    logits = add(matmul(h, transpose(params.out_w)), params.out_b)
    return log_softmax(logits, axis=-1), lens, aux
