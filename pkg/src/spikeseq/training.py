"""BPTT training loop, the layer-replacement experiment grid, and
gradient-explosion diagnostics.

Training is plain SGD over full (untruncated) sequences. Everything is
deterministic given the config seed: weight init, shuffle order, and the
numeric kernels, so identical configs produce bitwise-identical metric
traces and checkpoints.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_tensors
from .ctc import ctc_greedy_decode, ctc_loss
from .data import PaddedBatch, Utterance, pad_batch
from .encoder import EncoderConfig, EncoderParams, LayerSpec, encoder_forward, \
    init_encoder
from .metrics import ErrorRateReport, error_rate_report
from .rng import SplitMix64
from .tensor import Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig
    learning_rate: float = 0.5
    batch_size: int = 16
    epochs: int = 1
    clip: float | None = None
    seed: int = 0
    # absolute gradient-norm guard; None disables it (non-finite values
    # always count as divergence)
    explosion_bound: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive when set")


@dataclass
class RunMetrics:
    step_loss: list[float] = field(default_factory=list)
    step_grad_norm: list[float] = field(default_factory=list)
    step_spike_rate: list[dict[str, float]] = field(default_factory=list)
    epoch_reports: list[ErrorRateReport] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None

    def mean_spike_rate(self, step: int) -> float:
        rates = self.step_spike_rate[step]
        if not rates:
            return 0.0
        return sum(rates.values()) / len(rates)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    return float(np.sqrt(total))


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float, clip: float | None = None) -> bool:
    """In-place SGD update. Returns True (divergence, params untouched)
    when any gradient is non-finite; otherwise scales the global gradient
    norm down to `clip` if set and applies the update."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return True
    scale = 1.0
    if clip is not None:
        norm = global_grad_norm(grads)
        if norm > clip:
            scale = clip / norm
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        param.values = param.values - lr * (scale * g)
    return False


def _collect_grads(trainable: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.values))
            for name, t in trainable.items()}


def _zero_grads(trainable: dict[str, Tensor]) -> None:
    for t in trainable.values():
        t.grad = None


def _batches(count: int, batch_size: int, order: list[int]):
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def training_step(params: EncoderParams, batch: PaddedBatch):
    """One forward/backward pass; returns (loss value, grads, spike rates,
    per-item infeasible count folded into the loss)."""
    x = Tensor(batch.features)
    log_probs, out_lens, aux = encoder_forward(params, x,
                                               batch.frame_lengths)
    loss = ctc_loss(log_probs, batch.targets, out_lens)
    trainable = params.trainable()
    _zero_grads(trainable)
    loss_value = loss.item()
    if np.isfinite(loss_value):
        backward(loss)
    grads = _collect_grads(trainable)
    return loss_value, grads, aux["spike_rate"]


def evaluate(params: EncoderParams, items: list[Utterance],
             batch_size: int = 32) -> ErrorRateReport:
    """Greedy-decoded token error rate with its credible interval."""
    params.set_mode("eval")
    refs: list[list[int]] = []
    hyps: list[list[int]] = []
    for start in range(0, len(items), batch_size):
        batch = pad_batch(items[start:start + batch_size])
        x = Tensor(batch.features)
        log_probs, out_lens, _ = encoder_forward(params, x,
                                                 batch.frame_lengths)
        hyps.extend(ctc_greedy_decode(log_probs, out_lens))
        refs.extend(batch.targets)
    return error_rate_report(refs, hyps)


def train_run(config: TrainConfig, train_items: list[Utterance],
              eval_items: list[Utterance] | None = None,
              out_dir=None) -> tuple[RunMetrics, EncoderParams]:
    """Full training run. Divergence (non-finite loss or gradient norm, or
    a norm above the configured bound) stops the run with the flag set and
    the partial checkpoint still written."""
    if not train_items:
        raise ValueError("empty training set")
    rng = SplitMix64(config.seed)
    params = init_encoder(config.encoder, rng)
    metrics = RunMetrics()
    step = 0
    for _ in range(config.epochs):
        params.set_mode("train")
        order = rng.permutation(len(train_items))
        for chunk in _batches(len(train_items), config.batch_size, order):
            batch = pad_batch([train_items[i] for i in chunk])
            loss_value, grads, spike_rates = training_step(params, batch)
            norm = global_grad_norm(grads)
            metrics.step_loss.append(loss_value)
            metrics.step_grad_norm.append(norm)
            metrics.step_spike_rate.append(spike_rates)
            bound = config.explosion_bound
            if (not np.isfinite(loss_value) or not np.isfinite(norm)
                    or (bound is not None and norm > bound)):
                metrics.diverged = True
                metrics.divergence_step = step
                break
            if sgd_step(params.trainable(), grads, config.learning_rate,
                        config.clip):
                metrics.diverged = True
                metrics.divergence_step = step
                break
            step += 1
        if metrics.diverged:
            break
        if eval_items:
            metrics.epoch_reports.append(evaluate(params, eval_items))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensors(out_dir / "checkpoint.bin", params.to_arrays())
        (out_dir / "metrics.txt").write_text(format_metrics(metrics))
    return metrics, params


def format_metrics(metrics: RunMetrics) -> str:
    lines = []
    for i, (loss, norm) in enumerate(zip(metrics.step_loss,
                                         metrics.step_grad_norm)):
        lines.append(f"{i} {loss!r} {norm!r} "
                     f"{metrics.mean_spike_rate(i)!r}")
    for e, report in enumerate(metrics.epoch_reports):
        lines.append(f"epoch {e} {report.format_line()}")
    lines.append(f"diverged {int(metrics.diverged)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# replacement grid

@dataclass
class GridRow:
    label: str
    variant: str                  # "spiking" | "nonspiking"
    report: ErrorRateReport | None
    diverged: bool


def _with_layer_kinds(config: EncoderConfig, kinds: list[str]) -> EncoderConfig:
    layers = tuple(LayerSpec(kind=k, hidden=spec.hidden,
                             bidirectional=spec.bidirectional)
                   for k, spec in zip(kinds, config.layers))
    return replace(config, layers=layers)


def _grid_run(args):
    config, train_items, eval_items = args
    metrics, _ = train_run(config, train_items, eval_items)
    report = metrics.epoch_reports[-1] if metrics.epoch_reports else None
    return report, metrics.diverged


def replacement_grid(base: TrainConfig, train_items: list[Utterance],
                     eval_items: list[Utterance],
                     jobs: int = 1) -> list[GridRow]:
    """Replace the leading recurrent layers of the stack one by one,
    training a spiking and a nonspiking instance per configuration (the
    all-gated baseline runs once). A diverged run is recorded and the grid
    continues."""
    depth = len(base.encoder.layers)
    tasks: list[tuple[str, str, TrainConfig]] = []
    for k in range(depth + 1):
        label = f"{k} RNN - {depth - k} LSTM"
        variants = [("nonspiking", "rnn")] if k == 0 else \
            [("spiking", "lif"), ("nonspiking", "rnn")]
        for variant, kind in variants:
            kinds = [kind] * k + ["lstm"] * (depth - k)
            config = replace(base,
                             encoder=_with_layer_kinds(base.encoder, kinds))
            tasks.append((label, variant, config))
    payloads = [(cfg, train_items, eval_items) for _, _, cfg in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_run, payloads))
    else:
        results = [_grid_run(p) for p in payloads]
    return [GridRow(label=label, variant=variant, report=report,
                    diverged=diverged)
            for (label, variant, _), (report, diverged)
            in zip(tasks, results)]


def format_grid_table(rows: list[GridRow]) -> str:
    by_label: dict[str, dict[str, GridRow]] = {}
    order: list[str] = []
    for row in rows:
        if row.label not in by_label:
            by_label[row.label] = {}
            order.append(row.label)
        by_label[row.label][row.variant] = row

    def cell(row: GridRow | None) -> str:
        if row is None:
            return ""
        if row.diverged or row.report is None:
            return "diverged"
        r = row.report
        return (f"{100 * r.rate:.2f}% "
                f"[{100 * r.interval_low:.2f}%, {100 * r.interval_high:.2f}%]")

    lines = ["Encoder\tSpiking\tNonspiking"]
    for label in order:
        spiking = by_label[label].get("spiking")
        nonspiking = by_label[label].get("nonspiking")
        lines.append(f"{label}\t{cell(spiking)}\t{cell(nonspiking)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# exploding-gradient diagnostics

EXPLOSION_FACTOR = 1e3

DIAGNOSTIC_KINDS = {"spiking": "lif", "nonspiking": "rnn", "lstm": "lstm"}


@dataclass
class DiagnosticsSummary:
    variant: str
    seed: int
    initial_norm: float
    max_norm: float
    median_norm: float
    crossed_bound: bool
    norms: list[float]


def gradient_diagnostics(base: TrainConfig, items: list[Utterance],
                         seeds: list[int], steps: int,
                         variants=("spiking", "nonspiking", "lstm")
                         ) -> list[DiagnosticsSummary]:
    """Train each variant from identical seeds with clipping forcibly off,
    recording per-step global gradient norms and whether any step crossed
    1e3 times the initial norm. Divergence here is data, not an error."""
    out: list[DiagnosticsSummary] = []
    for variant in variants:
        kind = DIAGNOSTIC_KINDS[variant]
        for seed in seeds:
            kinds = [kind] * len(base.encoder.layers)
            config = replace(base, clip=None, seed=seed,
                             encoder=_with_layer_kinds(base.encoder, kinds))
            norms = _norm_trace(config, items, steps)
            initial = norms[0]
            bound = EXPLOSION_FACTOR * initial
            finite = [n for n in norms if np.isfinite(n)]
            crossed = any((not np.isfinite(n)) or n > bound for n in norms)
            out.append(DiagnosticsSummary(
                variant=variant, seed=seed, initial_norm=initial,
                max_norm=max(finite) if finite else float("inf"),
                median_norm=float(np.median(finite)) if finite else
                float("inf"),
                crossed_bound=crossed, norms=norms))
    return out


def _norm_trace(config: TrainConfig, items: list[Utterance],
                steps: int) -> list[float]:
    rng = SplitMix64(config.seed)
    params = init_encoder(config.encoder, rng)
    params.set_mode("train")
    norms: list[float] = []
    step = 0
    while step < steps:
        order = rng.permutation(len(items))
        for chunk in _batches(len(items), config.batch_size, order):
            if step >= steps:
                break
            batch = pad_batch([items[i] for i in chunk])
            loss_value, grads, _ = training_step(params, batch)
            norm = global_grad_norm(grads)
            norms.append(norm)
            step += 1
            if not np.isfinite(loss_value) or not np.isfinite(norm):
                return norms
            sgd_step(params.trainable(), grads, config.learning_rate,
                     clip=None)
    return norms


def format_diagnostics(summaries: list[DiagnosticsSummary]) -> str:
    lines = ["variant\tseed\tinitial\tmax\tmedian\tcrossed"]
    for s in summaries:
        lines.append(f"{s.variant}\t{s.seed}\t{s.initial_norm:.6g}\t"
                     f"{s.max_norm:.6g}\t{s.median_norm:.6g}\t"
                     f"{int(s.crossed_bound)}")
    return "\n".join(lines) + "\n"


def save_run_config(config: TrainConfig, path) -> None:
    enc = config.encoder
    payload = {
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "clip": config.clip,
        "seed": config.seed,
        "explosion_bound": config.explosion_bound,
        "encoder": {
            "input_dim": enc.input_dim,
            "conv": {"channels": enc.conv.channels, "width": enc.conv.width,
                     "stride": enc.conv.stride},
            "layers": [{"kind": s.kind, "hidden": s.hidden,
                        "bidirectional": s.bidirectional}
                       for s in enc.layers],
            "vocab_size": enc.vocab_size,
            "rnn_activation": enc.rnn_activation,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
