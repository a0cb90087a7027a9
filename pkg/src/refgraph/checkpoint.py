"""Checkpoint files: JSON header plus a compact binary float64 section.

Layout::

    REFGRAPH-CHECKPOINT-1\n
    {header JSON}\n
    <raw little-endian float64 tensor data, row-major, at header offsets>

The header carries the model configuration (and its hash), the vocabulary,
the training iteration, optional optimizer moments, and the exact state of
the model's dropout stream, so a loaded model evaluates — and continues
training — bit-identically to the saved one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .language import Vocabulary
from .model import Model, ModelConfig
from .optim import AdamState

__all__ = [
    "CHECKPOINT_MAGIC",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "LoadedCheckpoint",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "REFGRAPH-CHECKPOINT-1"


class CheckpointFormatError(ValueError):
    """The checkpoint file is malformed."""


class CheckpointVersionError(CheckpointFormatError):
    """The checkpoint declares a version this code does not read."""


@dataclass
class LoadedCheckpoint:
    model: Model
    iteration: int
    adam: Optional[AdamState]
    extra_rng_state: Optional[dict]


def config_hash(config: ModelConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _vocab_hash(tokens: list[str]) -> str:
    text = json.dumps(tokens, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _rng_state(rng: Optional[np.random.Generator]) -> Optional[dict]:
    return None if rng is None else rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, model: Model, iteration: int = 0,
                    adam: Optional[AdamState] = None,
                    extra_rng: Optional[np.random.Generator] = None) -> None:
    params = model.named_parameters()
    arrays: list[tuple[str, np.ndarray]] = [
        (name, np.ascontiguousarray(t.data, dtype=np.float64))
        for name, t in params.items()
    ]
    optimizer = None
    if adam is not None:
        optimizer = {"beta1": adam.beta1, "beta2": adam.beta2,
                     "eps": adam.eps, "step_count": adam.step_count}
        for name in sorted(adam.m):
            arrays.append((f"optim.m.{name}",
                           np.ascontiguousarray(adam.m[name], np.float64)))
            arrays.append((f"optim.v.{name}",
                           np.ascontiguousarray(adam.v[name], np.float64)))

    directory = []
    offset = 0
    for name, arr in arrays:
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes

    header = {
        "format_version": 1,
        "iteration": iteration,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "vocabulary": model.vocab.tokens,
        "vocabulary_hash": _vocab_hash(model.vocab.tokens),
        "rng": {"dropout": _rng_state(model.dropout_rng)},
        "extra_rng": _rng_state(extra_rng),
        "optimizer": optimizer,
        "tensors": directory,
    }
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("utf-8"))
        f.write((json.dumps(header, separators=(",", ":")) + "\n")
                .encode("utf-8"))
        for _, arr in arrays:
            f.write(arr.astype("<f8", copy=False).tobytes())


def _read_tensor(blob: bytes, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    end = entry["offset"] + entry["nbytes"]
    if end > len(blob):
        raise CheckpointFormatError(
            f"tensor {entry['name']!r} extends past the end of the file")
    arr = np.frombuffer(blob, dtype="<f8", count=count,
                        offset=entry["offset"])
    return arr.astype(np.float64).reshape(shape)


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8", errors="replace").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(
                f"not a supported checkpoint (expected {CHECKPOINT_MAGIC!r} "
                f"header, found {magic[:40]!r})")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"bad checkpoint header: {exc}")
        blob = f.read()

    if header.get("format_version") != 1:
        raise CheckpointVersionError(
            f"checkpoint format version {header.get('format_version')!r} "
            "is not supported")

    config = ModelConfig.from_dict(header["config"])
    if config_hash(config) != header.get("config_hash"):
        raise CheckpointFormatError("config hash mismatch")
    vocab = Vocabulary(header["vocabulary"])
    if vocab.tokens != header["vocabulary"]:
        raise CheckpointFormatError(
            "vocabulary is not in canonical sorted form")

    model = Model(config, vocab)
    params = model.named_parameters()

    entries = {e["name"]: e for e in header["tensors"]}
    if len(entries) != len(header["tensors"]):
        raise CheckpointFormatError("duplicate tensor names in checkpoint")

    param_entries = {n: e for n, e in entries.items()
                     if not n.startswith("optim.")}
    missing = sorted(set(params) - set(param_entries))
    extra = sorted(set(param_entries) - set(params))
    if missing or extra:
        raise CheckpointFormatError(
            f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in params.items():
        arr = _read_tensor(blob, entries[name])
        if arr.shape != tensor.data.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {arr.shape}, "
                f"model expects {tensor.data.shape}")
        tensor.data[...] = arr

    dropout_state = header.get("rng", {}).get("dropout")
    if dropout_state is not None:
        model.dropout_rng = _restore_rng(dropout_state)

    adam = None
    if header.get("optimizer") is not None:
        opt = header["optimizer"]
        adam = AdamState(beta1=opt["beta1"], beta2=opt["beta2"],
                         eps=opt["eps"], step_count=opt["step_count"])
        for name, entry in entries.items():
            if name.startswith("optim.m."):
                adam.m[name[len("optim.m."):]] = _read_tensor(blob, entry)
            elif name.startswith("optim.v."):
                adam.v[name[len("optim.v."):]] = _read_tensor(blob, entry)

    return LoadedCheckpoint(model=model, iteration=header["iteration"],
                            adam=adam,
                            extra_rng_state=header.get("extra_rng"))
