"""Synthetic datasets: labeled patch features and instruction/trajectory pairs.

Every class (stage 1) and every action type (stage 2) gets a fixed random
prototype feature pattern; samples add Gaussian noise around it, so both
stages are learnable by construction and fully deterministic under a seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError
from .segmenter import Instruction, pair_subpaths, split_instruction

_VERBS = [
    "walk into the", "walk out of the", "walk past the",
    "go through the", "walk towards the", "stop at the",
]
_ROOMS = ["kitchen", "bathroom", "hallway", "bedroom", "office", "garage", "balcony", "closet"]
_STANDALONE = [
    "turn left", "turn right", "turn around",
    "go up the stairs", "go down the stairs", "wait by the door",
]

ACTION_BANK: list[str] = [f"{verb} {room}" for verb in _VERBS for room in _ROOMS] + _STANDALONE

_JOINERS = [", ", " and ", ". "]


@dataclass
class IndoorSample:
    features: np.ndarray  # (num_patches, feature_dim)
    label: int


@dataclass
class TrajectorySample:
    viewpoints: np.ndarray  # (T, feature_dim)
    instruction: Instruction
    chunks: list[tuple[int, int]]
    sub_instructions: list[str]


def gen_indoor_dataset(
    num_classes: int = 10,
    samples_per_class: int = 100,
    noise: float = 0.1,
    seed: int = 0,
    num_patches: int = 4,
    feature_dim: int = 16,
) -> list[IndoorSample]:
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    if samples_per_class < 1:
        raise ParameterError("samples_per_class must be positive")
    rng = np.random.default_rng([seed, 101])
    prototypes = rng.normal(size=(num_classes, num_patches, feature_dim))
    samples = []
    for label in range(num_classes):
        for _ in range(samples_per_class):
            features = prototypes[label] + noise * rng.standard_normal((num_patches, feature_dim))
            samples.append(IndoorSample(features=features, label=label))
    return samples


def gen_trajectory_dataset(
    count: int = 500,
    subpaths_range: tuple[int, int] = (2, 4),
    viewpoints_range: tuple[int, int] = (4, 8),
    seed: int = 0,
    feature_dim: int = 16,
    noise: float = 0.1,
    duplicate_prob: float = 0.3,
) -> list[TrajectorySample]:
    """Trajectories whose sub-paths are noisy copies of per-action prototypes.

    With probability ``duplicate_prob`` a trajectory repeats one action type,
    which makes the ordinal information genuinely informative: identical
    action texts can then only be told apart by their position.
    """
    m_lo, m_hi = subpaths_range
    t_lo, t_hi = viewpoints_range
    if not (1 <= m_lo <= m_hi):
        raise ParameterError(f"bad sub-path range {subpaths_range}")
    if t_hi < t_lo or t_hi < m_hi:
        raise ParameterError(f"viewpoint range {viewpoints_range} cannot cover up to {m_hi} sub-paths")
    if count < 1:
        raise ParameterError("count must be positive")

    rng = np.random.default_rng([seed, 202])
    prototypes = rng.normal(size=(len(ACTION_BANK), feature_dim))
    samples = []
    for _ in range(count):
        m = int(rng.integers(m_lo, m_hi + 1))
        t = int(rng.integers(max(t_lo, m), t_hi + 1))
        if m >= 2 and rng.random() < duplicate_prob:
            actions = list(rng.choice(len(ACTION_BANK), size=m - 1, replace=False))
            actions.insert(int(rng.integers(0, m)), actions[int(rng.integers(0, m - 1))])
        else:
            actions = list(rng.choice(len(ACTION_BANK), size=m, replace=False))
        sizes = 1 + rng.multinomial(t - m, np.full(m, 1.0 / m))
        chunks = []
        cursor = 0
        rows = []
        for action, size in zip(actions, sizes):
            chunks.append((cursor, cursor + int(size)))
            cursor += int(size)
            rows.append(prototypes[action] + noise * rng.standard_normal((int(size), feature_dim)))
        sub_texts = [ACTION_BANK[a] for a in actions]
        text = sub_texts[0]
        for sub in sub_texts[1:]:
            text += _JOINERS[int(rng.integers(0, len(_JOINERS)))] + sub
        text += "."
        samples.append(
            TrajectorySample(
                viewpoints=np.concatenate(rows, axis=0),
                instruction=Instruction.from_text(text),
                chunks=chunks,
                sub_instructions=sub_texts,
            )
        )
    return samples


def split_indices(n: int, seed: int, val_fraction: float) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split by hashing (seed, index)."""
    train, val = [], []
    for i in range(n):
        digest = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2**64
        (val if u < val_fraction else train).append(i)
    return train, val


# -- JSONL persistence -----------------------------------------------------------


def write_indoor_jsonl(samples: list[IndoorSample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"features": s.features.tolist(), "label": int(s.label)}))
            fh.write("\n")


def read_indoor_jsonl(path: str) -> list[IndoorSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            features = np.asarray(obj.get("features"), dtype=np.float64)
            label = obj.get("label")
            if features.ndim != 2 or not isinstance(label, int):
                raise ValidationError(f"{path}:{lineno}: malformed indoor sample")
            samples.append(IndoorSample(features=features, label=label))
    if not samples:
        from .errors import DatasetError

        raise DatasetError(f"{path}: no indoor samples")
    return samples


def write_trajectory_jsonl(samples: list[TrajectorySample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "instruction": s.instruction.text,
                        "path": s.viewpoints.tolist(),
                        "chunk_view": [list(c) for c in s.chunks],
                        "sub_instructions": s.sub_instructions,
                    }
                )
            )
            fh.write("\n")


def read_trajectory_jsonl(path: str) -> list[TrajectorySample]:
    """Load trajectories, re-segmenting and uniformly chunking where absent."""
    from .segmenter import load_dataset

    records = load_dataset(path)
    samples = []
    for rec in records:
        viewpoints = np.asarray(rec.path, dtype=np.float64)
        if viewpoints.ndim != 2:
            raise ValidationError("trajectory 'path' must hold per-viewpoint feature vectors")
        subs = split_instruction(rec.instruction)
        pairs = pair_subpaths(subs, len(rec.path), chunks=[list(c) for c in rec.chunks] if rec.chunks else None)
        samples.append(
            TrajectorySample(
                viewpoints=viewpoints,
                instruction=rec.instruction,
                chunks=[(p.start, p.end) for p in pairs],
                sub_instructions=[p.sub_instruction.text for p in pairs],
            )
        )
    return samples
