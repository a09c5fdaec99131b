"""Synthetic transcription task, batching, and dataset serialization.

Each vocabulary token owns a Gaussian prototype feature vector (fixed by
the seed); an utterance is a random token sequence where every token emits
a contiguous block of frames equal to its prototype plus white noise.
Utterance i draws from the splitmix64 stream seeded with (seed XOR i), so
generation is order-independent and bit-reproducible.

On disk a dataset directory holds `manifest.json`, `features.bin` (the
binary tensor container), and `targets.txt` with one space-separated line
of token ids per utterance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .rng import SplitMix64

_PROTO_SALT = 0x9E3779B97F4A7C15  # keeps the prototype stream off any index

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int                  # token ids 1..vocab_size; 0 is blank
    tokens_range: tuple[int, int]    # inclusive token count per utterance
    frames_range: tuple[int, int]    # inclusive frames per token
    feature_dim: int = 40
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.tokens_range[0] < 1 or self.tokens_range[1] < self.tokens_range[0]:
            raise ValueError("tokens_range must be a nonempty positive range")
        if self.frames_range[0] < 1 or self.frames_range[1] < self.frames_range[0]:
            raise ValueError("frames_range must be a nonempty positive range")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Utterance:
    features: np.ndarray        # [frames, feature_dim]
    tokens: list[int]


def _prototypes(spec: SynthSpec) -> np.ndarray:
    rng = SplitMix64(spec.seed ^ _PROTO_SALT)
    return rng.normals((spec.vocab_size, spec.feature_dim))


def generate_synthetic(spec: SynthSpec, count: int,
                       start_index: int = 0) -> list[Utterance]:
    """`count` utterances for indices start_index..start_index+count-1.

    Disjoint index ranges over the same spec give disjoint, consistent
    splits (e.g. train at 0.., test continuing after).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    protos = _prototypes(spec)
    items = []
    for i in range(start_index, start_index + count):
        rng = SplitMix64(spec.seed ^ i)
        n_tokens = rng.randint_range(*spec.tokens_range)
        tokens = [1 + rng.randint(spec.vocab_size) for _ in range(n_tokens)]
        blocks = [rng.randint_range(*spec.frames_range) for _ in tokens]
        total = sum(blocks)
        noise = rng.normals((total, spec.feature_dim)) * spec.noise
        features = np.empty((total, spec.feature_dim))
        row = 0
        for tok, length in zip(tokens, blocks):
            features[row:row + length] = protos[tok - 1]
            row += length
        features += noise
        items.append(Utterance(features=features, tokens=tokens))
    return items


# ---------------------------------------------------------------------------
# batching

@dataclass
class PaddedBatch:
    features: np.ndarray        # [batch, t_max, dim], zero-padded
    frame_lengths: np.ndarray   # [batch]
    targets: list[list[int]]
    target_lengths: np.ndarray  # [batch]


def pad_batch(items: list[Utterance], pad_to: int | None = None) -> PaddedBatch:
    if not items:
        raise ValueError("cannot pad an empty batch")
    dim = items[0].features.shape[1]
    for u in items:
        if u.features.shape[1] != dim:
            raise ValueError(
                f"inconsistent feature dims {u.features.shape[1]} vs {dim}")
    lengths = np.array([len(u.features) for u in items], dtype=np.int64)
    t_max = int(lengths.max())
    if pad_to is not None:
        if pad_to < t_max:
            raise ValueError(f"pad_to {pad_to} shorter than longest item "
                             f"{t_max}")
        t_max = pad_to
    features = np.zeros((len(items), t_max, dim))
    for i, u in enumerate(items):
        features[i, :lengths[i]] = u.features
    return PaddedBatch(
        features=features,
        frame_lengths=lengths,
        targets=[list(u.tokens) for u in items],
        target_lengths=np.array([len(u.tokens) for u in items],
                                dtype=np.int64),
    )


def unpad_batch(batch: PaddedBatch) -> list[Utterance]:
    return [Utterance(features=batch.features[i, :batch.frame_lengths[i]].copy(),
                      tokens=list(batch.targets[i]))
            for i in range(len(batch.targets))]


# ---------------------------------------------------------------------------
# serialization

def save_dataset(directory, items: list[Utterance],
                 spec: SynthSpec | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(items),
        "feature_dim": int(items[0].features.shape[1]) if items else 0,
    }
    if spec is not None:
        manifest["synth_spec"] = asdict(spec)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    save_tensors(directory / "features.bin",
                 {f"utterance/{i}": u.features for i, u in enumerate(items)})
    lines = [" ".join(str(t) for t in u.tokens) for u in items]
    (directory / "targets.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory) -> list[Utterance]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(
            f"unsupported dataset format {manifest['format_version']}")
    tensors = load_tensors(directory / "features.bin")
    target_lines = (directory / "targets.txt").read_text().splitlines()
    count = manifest["count"]
    if len(target_lines) != count:
        raise ValueError(f"manifest says {count} utterances, targets.txt "
                         f"has {len(target_lines)}")
    items = []
    for i in range(count):
        tokens = [int(t) for t in target_lines[i].split()]
        items.append(Utterance(features=tensors[f"utterance/{i}"],
                               tokens=tokens))
    return items
