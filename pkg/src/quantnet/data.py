"""Dataset directory formats and a deterministic synthetic classification set.

Calibration data is a directory of raw float32 batch files listed by an
``index.txt`` of ``batch <file> <shape>`` lines.  Labeled data is an index
file of ``sample <tensor-file> <label-int>`` lines, one image tensor per
file.  The synthetic dataset derives every value from SHAKE-256 digests, so
it reproduces bit-for-bit on any platform or library version.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .model_io import ParseError, read_blob, write_blob

__all__ = [
    "INDEX_NAME",
    "make_synthetic",
    "read_batch_dir",
    "read_labeled_index",
    "synthetic_templates",
    "write_batch_dir",
    "write_labeled_dataset",
]

INDEX_NAME = "index.txt"


def write_batch_dir(directory: str | Path, batches: list[np.ndarray]) -> None:
    """Write calibration batches plus their index file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, batch in enumerate(batches):
        batch = np.asarray(batch, dtype=np.float32)
        name = f"batch_{i:04d}.bin"
        write_blob(directory / name, batch)
        lines.append(f"batch {name} {'x'.join(str(d) for d in batch.shape)}")
    (directory / INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_batch_dir(directory: str | Path) -> list[np.ndarray]:
    """Load every batch declared in the directory's index file."""
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise ParseError(f"no {INDEX_NAME} in {directory}")
    batches = []
    for lineno, raw in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3 or tokens[0] != "batch":
            raise ParseError(f"expected 'batch <file> <shape>'", lineno)
        shape = tuple(int(d) for d in tokens[2].split("x"))
        batches.append(read_blob(directory / tokens[1], shape))
    return batches


def write_labeled_dataset(directory: str | Path, samples: np.ndarray,
                          labels: np.ndarray) -> Path:
    """Write one tensor file per sample and return the index file path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (sample, label) in enumerate(zip(samples, labels)):
        name = f"sample_{i:05d}.bin"
        write_blob(directory / name, np.asarray(sample, dtype=np.float32))
        lines.append(f"sample {name} {int(label)}")
    index = directory / INDEX_NAME
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index


def read_labeled_index(index_path: str | Path,
                       sample_shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Load a labeled dataset as (stacked samples, labels)."""
    index_path = Path(index_path)
    if not index_path.exists():
        raise ParseError(f"labels index not found: {index_path}")
    samples, labels = [], []
    for lineno, raw in enumerate(index_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3 or tokens[0] != "sample":
            raise ParseError("expected 'sample <tensor-file> <label-int>'", lineno)
        samples.append(read_blob(index_path.parent / tokens[1], sample_shape))
        labels.append(int(tokens[2]))
    return np.stack(samples) if samples else np.zeros((0, *sample_shape), np.float32), \
        np.asarray(labels, dtype=np.int64)


def _hash_floats(tag: str, count: int) -> np.ndarray:
    """``count`` uniform [0, 1) float32 values derived from a SHAKE-256 digest."""
    raw = hashlib.shake_256(tag.encode("utf-8")).digest(count * 4)
    ints = np.frombuffer(raw, dtype="<u4").astype(np.float64)
    return (ints / 2.0**32).astype(np.float32)


def synthetic_templates(classes: int = 10,
                        shape: tuple[int, int, int] = (3, 8, 8)) -> np.ndarray:
    """Fixed per-class patterns in [0, 1), shape (classes, C, H, W)."""
    count = int(np.prod(shape))
    return np.stack(
        [_hash_floats(f"synth-template-{k}", count).reshape(shape) for k in range(classes)]
    )


def make_synthetic(split: str, count: int, classes: int = 10,
                   shape: tuple[int, int, int] = (3, 8, 8),
                   noise: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic labeled images: class template blended with per-sample noise.

    Labels cycle through the classes; values stay in [0, 1) so the input is a
    non-negative activation.
    """
    templates = synthetic_templates(classes, shape)
    n_values = int(np.prod(shape))
    xs = np.empty((count, *shape), dtype=np.float32)
    ys = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % classes
        jitter = _hash_floats(f"synth-{split}-{i}", n_values).reshape(shape)
        xs[i] = (1.0 - noise) * templates[label] + noise * jitter
        ys[i] = label
    return xs, ys
