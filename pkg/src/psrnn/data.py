"""Character corpora and CSV trajectories, with splits and manifests."""

from __future__ import annotations

import csv
import glob as globlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, IoError, NonNumeric, RaggedRows

__all__ = ["Dataset", "load_chars", "load_trajectories", "load_data", "symbols_to_text"]


@dataclass
class Dataset:
    """Observation sequences with their train/test assignment.

    Symbol datasets hold integer arrays over ``alphabet`` (byte values) plus
    one reserved UNK id equal to ``len(alphabet)``. Vector datasets hold
    ``(T, dim)`` float arrays already standardized with ``mean``/``std``
    fitted on the training sequences.
    """

    kind: str
    sequences: list
    train_ids: list
    test_ids: list
    alphabet: list | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def n_symbols(self) -> int | None:
        return None if self.alphabet is None else len(self.alphabet) + 1

    @property
    def unk(self) -> int | None:
        return None if self.alphabet is None else len(self.alphabet)

    @property
    def dim(self) -> int | None:
        if self.kind == "discrete":
            return None
        return int(self.sequences[0].shape[1])

    @property
    def train(self) -> list:
        return [self.sequences[i] for i in self.train_ids]

    @property
    def test(self) -> list:
        return [self.sequences[i] for i in self.test_ids]

    def encode(self, text: bytes) -> np.ndarray:
        lookup = np.full(256, self.unk, dtype=np.int64)
        lookup[np.asarray(self.alphabet, dtype=np.int64)] = np.arange(len(self.alphabet))
        return lookup[np.frombuffer(text, dtype=np.uint8)]

    def save(self, path) -> None:
        """Write ``<path>.npz`` with the arrays and ``<path>.json`` with the rest."""
        path = Path(path)
        arrays = {f"seq{i}": s for i, s in enumerate(self.sequences)}
        if self.mean is not None:
            arrays["mean"], arrays["std"] = self.mean, self.std
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {
            "kind": self.kind,
            "n_sequences": len(self.sequences),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "alphabet": self.alphabet,
            "manifest": self.manifest,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        try:
            meta = json.loads(path.with_suffix(".json").read_text())
            with np.load(path.with_suffix(".npz")) as z:
                seqs = [z[f"seq{i}"] for i in range(meta["n_sequences"])]
                mean = z["mean"] if "mean" in z else None
                std = z["std"] if "std" in z else None
        except OSError as exc:
            raise IoError(f"cannot read dataset {path}: {exc}") from exc
        return cls(meta["kind"], seqs, meta["train_ids"], meta["test_ids"], meta["alphabet"], mean, std,
                   meta["manifest"])


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def load_chars(path, split_fraction: float = 0.8) -> Dataset:
    """Byte-level corpus split into a leading train and trailing test part.

    The alphabet is built from the training bytes only; test bytes outside
    it map to the UNK id.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    raw = _read_bytes(path)
    if not raw:
        raise EmptyCorpus(f"{path} is empty")
    cut = int(round(len(raw) * split_fraction))
    train, test = raw[:cut], raw[cut:]
    if not train:
        raise EmptyCorpus(f"{path}: split {split_fraction} leaves no training characters")
    alphabet = sorted(set(train))
    ds = Dataset("discrete", [], [0], [], alphabet=alphabet)
    ds.sequences.append(ds.encode(train))
    if test:
        ds.sequences.append(ds.encode(test))
        ds.test_ids.append(1)
    ds.manifest = {
        "source": os.fspath(path),
        "split_fraction": split_fraction,
        "train_chars": len(train),
        "test_chars": len(test),
        "test_unk": int(np.sum(ds.sequences[-1] == ds.unk)) if test else 0,
    }
    return ds


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]  # header
    if not rows:
        raise EmptyCorpus(f"{path} has no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise RaggedRows(f"{path}: row {i + 1} has {len(r)} columns, expected {width}")
    try:
        return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise NonNumeric(f"{path}: {exc}") from exc


def _expand(pattern) -> list:
    pattern = os.fspath(pattern)
    if os.path.isdir(pattern):
        return sorted(globlib.glob(os.path.join(pattern, "*.csv")))
    return sorted(globlib.glob(pattern))


def load_trajectories(pattern, split: float = 0.8) -> Dataset:
    """One sequence per CSV file; files are taken in sorted order.

    ``split`` is either a train fraction in (0, 1) (at least one training
    file is kept) or a whole number of training files. Standardization
    statistics come from the training files; constant columns keep std 1.
    """
    files = _expand(pattern)
    if not files:
        raise IoError(f"no files match {pattern}")
    seqs = [_read_csv(f) for f in files]
    dims = {s.shape[1] for s in seqs}
    if len(dims) != 1:
        raise RaggedRows(f"files disagree on the number of columns: {sorted(dims)}")
    n = len(files)
    n_train = int(split) if split >= 1 else max(1, int(round(split * n)))
    n_train = min(n_train, n)
    stacked = np.vstack(seqs[:n_train])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    seqs = [(s - mean) / std for s in seqs]
    manifest = {
        "files": [os.fspath(f) for f in files],
        "train_files": n_train,
        "test_files": n - n_train,
        "train_steps": int(sum(s.shape[0] for s in seqs[:n_train])),
    }
    return Dataset("continuous", seqs, list(range(n_train)), list(range(n_train, n)), None, mean, std, manifest)


def load_data(path, split: float = 0.8) -> Dataset:
    """Dispatch on the path: CSV files, globs and directories are trajectories, anything else text."""
    p = os.fspath(path)
    if os.path.isdir(p) or p.endswith(".csv") or any(ch in p for ch in "*?["):
        return load_trajectories(p, split)
    if not os.path.exists(p):
        raise IoError(f"{p} does not exist")
    return load_chars(p, split)


def symbols_to_text(symbols) -> bytes:
    """Symbols 0, 1, ... as the bytes ``a``, ``b``, ... (for synthetic corpora)."""
    s = np.asarray(symbols, dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() >= 26):
        raise ValueError("only alphabets of up to 26 symbols can be written as text")
    return (s + ord("a")).astype(np.uint8).tobytes()
