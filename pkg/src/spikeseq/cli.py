"""Command-line entry point.

Subcommands: gen-data, train, eval, grid, diagnose, simulate, features.
Every run is fully determined by its JSON config file (plus --seed /
--out / --jobs overrides); unknown config keys are rejected by name.

Environment overrides (used when the flag is absent): SPIKESEQ_SEED,
SPIKESEQ_OUT, SPIKESEQ_JOBS.

Exit codes: 0 success, 1 usage error, 2 runtime divergence or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import SynthSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import ConvSpec, EncoderConfig, LayerSpec, init_encoder
from .features import FeatureConfig, log_mel, read_wav
from .layers import simulate_neuron
from .rng import SplitMix64
from .training import (
    TrainConfig,
    evaluate,
    format_diagnostics,
    format_grid_table,
    gradient_diagnostics,
    replacement_grid,
    save_run_config,
    train_run,
)


class UsageError(Exception):
    pass


class RunFailure(Exception):
    pass


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise RunFailure(f"cannot read config: {err}") from None
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"config is not valid JSON: {err}") from None
    if not isinstance(config, dict):
        raise UsageError("config must be a JSON object")
    return config


def _check_keys(obj: dict, allowed: set[str], context: str) -> None:
    for key in obj:
        if key not in allowed:
            raise UsageError(f"unknown key {key!r} in {context}")


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise UsageError(f"missing key {key!r} in {context}")
    return obj[key]


def _int_pair(value, context: str) -> tuple[int, int]:
    if (not isinstance(value, list) or len(value) != 2
            or not all(isinstance(v, int) for v in value)):
        raise UsageError(f"{context} must be a two-integer list")
    return value[0], value[1]


def _synth_spec(obj: dict, context: str, seed_override=None) -> SynthSpec:
    _check_keys(obj, {"vocab_size", "tokens_range", "frames_range",
                      "feature_dim", "noise", "seed"}, context)
    try:
        return SynthSpec(
            vocab_size=_require(obj, "vocab_size", context),
            tokens_range=_int_pair(_require(obj, "tokens_range", context),
                                   f"{context}.tokens_range"),
            frames_range=_int_pair(_require(obj, "frames_range", context),
                                   f"{context}.frames_range"),
            feature_dim=obj.get("feature_dim", 40),
            noise=obj.get("noise", 0.5),
            seed=seed_override if seed_override is not None
            else obj.get("seed", 0),
        )
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad {context}: {err}") from None


def _encoder_config(obj: dict, input_dim: int, vocab_size: int,
                    context: str = "encoder") -> EncoderConfig:
    _check_keys(obj, {"conv", "layers", "rnn_activation", "vocab_size",
                      "input_dim"}, context)
    conv_obj = obj.get("conv", {})
    _check_keys(conv_obj, {"channels", "width", "stride"}, f"{context}.conv")
    layers_obj = _require(obj, "layers", context)
    if not isinstance(layers_obj, list) or not layers_obj:
        raise UsageError(f"{context}.layers must be a nonempty list")
    layers = []
    for i, entry in enumerate(layers_obj):
        _check_keys(entry, {"kind", "hidden", "bidirectional"},
                    f"{context}.layers[{i}]")
        layers.append(LayerSpec(
            kind=_require(entry, "kind", f"{context}.layers[{i}]"),
            hidden=_require(entry, "hidden", f"{context}.layers[{i}]"),
            bidirectional=entry.get("bidirectional", True)))
    try:
        return EncoderConfig(
            input_dim=obj.get("input_dim", input_dim),
            conv=ConvSpec(channels=conv_obj.get("channels", 32),
                          width=conv_obj.get("width", 3),
                          stride=conv_obj.get("stride", 2)),
            layers=tuple(layers),
            vocab_size=obj.get("vocab_size", vocab_size),
            rnn_activation=obj.get("rnn_activation", "relu"),
        )
    except ValueError as err:
        raise UsageError(f"bad {context}: {err}") from None


def _dataset_dims(items) -> tuple[int, int]:
    input_dim = items[0].features.shape[1]
    vocab = 1 + max((max(u.tokens) if u.tokens else 0) for u in items)
    return input_dim, max(vocab, 2)


def _load_split(root, context: str):
    root = Path(root)
    try:
        if (root / "train").is_dir():
            return load_dataset(root / "train"), load_dataset(root / "test")
        items = load_dataset(root)
        return items, items
    except (OSError, ValueError, KeyError) as err:
        raise RunFailure(f"cannot load {context} dataset: {err}") from None


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, {"vocab_size", "tokens_range", "frames_range",
                         "feature_dim", "noise", "seed", "train_count",
                         "test_count"}, "config")
    spec = _synth_spec({k: v for k, v in config.items()
                        if k not in ("train_count", "test_count")},
                       "config", seed_override=args.seed)
    train_count = config.get("train_count", 100)
    test_count = config.get("test_count", 20)
    out = Path(args.out)
    train_items = generate_synthetic(spec, train_count)
    test_items = generate_synthetic(spec, test_count,
                                    start_index=train_count)
    save_dataset(out / "train", train_items, spec)
    save_dataset(out / "test", test_items, spec)
    print(f"wrote {train_count} train / {test_count} test utterances "
          f"to {out}")
    return 0


def _build_train_config(config: dict, args) -> tuple[TrainConfig, list, list]:
    _check_keys(config, {"dataset", "learning_rate", "batch_size", "epochs",
                         "clip", "seed", "explosion_bound", "encoder"},
                "config")
    dataset = _require(config, "dataset", "config")
    train_items, eval_items = _load_split(dataset, "training")
    input_dim, vocab = _dataset_dims(train_items)
    encoder = _encoder_config(_require(config, "encoder", "config"),
                              input_dim, vocab)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    try:
        tc = TrainConfig(
            encoder=encoder,
            learning_rate=config.get("learning_rate", 0.5),
            batch_size=config.get("batch_size", 16),
            epochs=config.get("epochs", 1),
            clip=config.get("clip"),
            seed=seed,
            explosion_bound=config.get("explosion_bound"),
        )
    except ValueError as err:
        raise UsageError(f"bad config: {err}") from None
    return tc, train_items, eval_items


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    tc, train_items, eval_items = _build_train_config(config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, _ = train_run(tc, train_items, eval_items, out_dir=out)
    save_run_config(tc, out / "config.json")
    if metrics.epoch_reports:
        report = metrics.epoch_reports[-1]
        (out / "report.txt").write_text(report.format_line() + "\n")
        print(f"final error rate {report.rate:.4f} "
              f"[{report.interval_low:.4f}, {report.interval_high:.4f}]")
    if metrics.diverged:
        print(f"run diverged at step {metrics.divergence_step}",
              file=sys.stderr)
        return 2
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, {"run_dir", "dataset"}, "config")
    run_dir = Path(_require(config, "run_dir", "config"))
    try:
        run_config = json.loads((run_dir / "config.json").read_text())
        arrays = load_tensors(run_dir / "checkpoint.bin")
    except (OSError, ValueError) as err:
        raise RunFailure(f"cannot load run: {err}") from None
    _, eval_items = _load_split(_require(config, "dataset", "config"),
                                "evaluation")
    input_dim, vocab = _dataset_dims(eval_items)
    encoder = _encoder_config(run_config["encoder"], input_dim, vocab)
    params = init_encoder(encoder, SplitMix64(run_config.get("seed", 0)))
    try:
        params.load_arrays(arrays)
    except (KeyError, ValueError) as err:
        raise RunFailure(f"checkpoint does not match encoder: {err}") \
            from None
    report = evaluate(params, eval_items)
    line = report.format_line()
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(line + "\n")
    return 0


def _cmd_grid(args) -> int:
    config = _load_config(args.config)
    tc, train_items, eval_items = _build_train_config(config, args)
    rows = replacement_grid(tc, train_items, eval_items, jobs=args.jobs)
    table = format_grid_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.tsv").write_text(table)
    print(table, end="")
    return 0


def _cmd_diagnose(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, {"synth", "count", "steps", "seeds", "variants",
                         "learning_rate", "batch_size", "encoder", "seed"},
                "config")
    spec = _synth_spec(_require(config, "synth", "config"), "config.synth")
    count = config.get("count", 32)
    items = generate_synthetic(spec, count)
    input_dim, vocab = _dataset_dims(items)
    encoder = _encoder_config(_require(config, "encoder", "config"),
                              input_dim, vocab)
    seeds = config.get("seeds", [0, 1, 2, 3, 4])
    variants = tuple(config.get("variants",
                                ["spiking", "nonspiking", "lstm"]))
    tc = TrainConfig(encoder=encoder,
                     learning_rate=config.get("learning_rate", 0.5),
                     batch_size=config.get("batch_size", 4))
    summaries = gradient_diagnostics(tc, items, seeds=seeds,
                                     steps=config.get("steps", 50),
                                     variants=variants)
    text = format_diagnostics(summaries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.tsv").write_text(text)
    print(text, end="")
    return 0


def _cmd_simulate(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, {"steps", "alpha", "threshold", "weight",
                         "recurrent", "input_current", "input_spikes",
                         "input_values"}, "config")
    alpha = config.get("alpha", 0.9)
    threshold = config.get("threshold", 1.0)
    weight = config.get("weight", 1.0)
    sources = [k for k in ("input_current", "input_spikes", "input_values")
               if k in config]
    if len(sources) != 1:
        raise UsageError("config needs exactly one of input_current, "
                         "input_spikes, input_values")
    if sources[0] == "input_values":
        drive = np.asarray(config["input_values"], dtype=np.float64)
    elif sources[0] == "input_current":
        steps = _require(config, "steps", "config")
        drive = np.full(int(steps), float(config["input_current"]))
    else:
        steps = _require(config, "steps", "config")
        drive = np.zeros(int(steps))
        for t in config["input_spikes"]:
            if not 0 <= int(t) < len(drive):
                raise UsageError(f"input spike time {t} outside [0, steps)")
            drive[int(t)] = 1.0
    try:
        stim, potential, spikes = simulate_neuron(
            drive * weight, alpha=alpha, threshold=threshold,
            recurrent=config.get("recurrent", 0.0))
    except ValueError as err:
        raise UsageError(str(err)) from None
    lines = ["t I u s"]
    for t in range(len(stim)):
        lines.append(f"{t} {stim[t]!r} {potential[t]!r} {int(spikes[t])}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.txt").write_text("\n".join(lines) + "\n")
    print(f"simulated {len(stim)} steps, {int(spikes.sum())} spikes")
    return 0


def _cmd_features(args) -> int:
    config = _load_config(args.config) if args.config else {}
    _check_keys(config, {"sample_rate", "frame_ms", "hop_ms", "mel_bins",
                         "fmin", "fmax", "dft_size", "wav"}, "config")
    wav_path = args.wav or config.get("wav")
    if not wav_path:
        raise UsageError("features needs --wav or a 'wav' config key")
    try:
        clip = read_wav(Path(wav_path).read_bytes())
    except OSError as err:
        raise RunFailure(f"cannot read wav: {err}") from None
    except ValueError as err:
        raise RunFailure(f"bad wav file: {err}") from None
    try:
        feat_config = FeatureConfig(
            sample_rate=config.get("sample_rate", clip.sample_rate),
            frame_ms=config.get("frame_ms", 25.0),
            hop_ms=config.get("hop_ms", 10.0),
            mel_bins=config.get("mel_bins", 40),
            fmin=config.get("fmin", 0.0),
            fmax=config.get("fmax"),
            dft_size=config.get("dft_size"),
        )
        feats = log_mel(clip, feat_config)
    except ValueError as err:
        raise RunFailure(f"feature extraction failed: {err}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensors(out / "features.bin", {
        "features": feats,
        "sample_rate": np.array([clip.sample_rate], dtype=np.int64),
    })
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features")
    return 0


# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grid": _cmd_grid,
    "diagnose": _cmd_diagnose,
    "simulate": _cmd_simulate,
    "features": _cmd_features,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikeseq",
        description="Spiking sequence-transcription experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config file (schema depends on command)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel runs for grid")
        p.add_argument("--wav", default=None,
                       help="input wav file (features command)")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exit_info:
        # argparse uses status 2 for usage problems; --help exits with 0
        return 0 if exit_info.code == 0 else 1
    if args.seed is None and os.environ.get("SPIKESEQ_SEED"):
        args.seed = int(os.environ["SPIKESEQ_SEED"])
    if args.out is None:
        args.out = os.environ.get("SPIKESEQ_OUT", ".")
    if args.jobs is None:
        jobs = os.environ.get("SPIKESEQ_JOBS")
        args.jobs = int(jobs) if jobs else 1
    if args.config is None and args.command != "features":
        print(f"{args.command}: --config is required", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except RunFailure as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
