"""Text-conditioned modulation: embeddings, adapter, and FiLM.

Prompt embeddings (512-dim, one per prompt category) are consumed from
files; a lightweight affine adapter turns them into per-channel scale and
shift parameters applied as  out = in * (1 + gamma) + beta.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

EMBED_DIM = 512
SOURCES = ("anatomy", "diagnosis", "planning")


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray            # (512,) float32
    source: str = "anatomy"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (EMBED_DIM,):
            raise ValidationError(f"embedding must have dim {EMBED_DIM}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("embedding contains non-finite values")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class FilmParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.ndim != 1 or g.shape != b.shape:
            raise ValidationError("gamma and beta must be equal-length vectors")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            raise ValidationError("FiLM parameters must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class FeatureGrid:
    """C channels of identically shaped 3-D data."""

    data: np.ndarray              # (C, nx, ny, nz)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 4:
            raise ValidationError("feature grid must have shape (C, nx, ny, nz)")
        if not np.all(np.isfinite(d)):
            raise ValidationError("feature grid contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class AdapterWeights:
    """Affine map 512 -> 2C: first C outputs gamma, last C beta."""

    matrix: np.ndarray            # (2C, 512)
    bias: np.ndarray              # (2C,)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != EMBED_DIM or m.shape[0] % 2 != 0:
            raise ValidationError(f"adapter matrix must be (2C, {EMBED_DIM}), got {m.shape}")
        if b.shape != (m.shape[0],):
            raise ValidationError("adapter bias length must match matrix rows")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)

    @property
    def channels(self) -> int:
        return self.matrix.shape[0] // 2

    @classmethod
    def random(cls, channels: int, seed: int = 0, scale: float = 0.01) -> "AdapterWeights":
        """Small random initialization for tests / demos."""
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(2 * channels, EMBED_DIM)),
                   rng.normal(0.0, scale, size=(2 * channels,)))

    @classmethod
    def identity(cls, channels: int) -> "AdapterWeights":
        """Zero weights: downstream FiLM is the identity."""
        return cls(np.zeros((2 * channels, EMBED_DIM)), np.zeros(2 * channels))


def film(features: FeatureGrid, params: FilmParams) -> FeatureGrid:
    """Per-channel affine modulation out_c = in_c * (1 + gamma_c) + beta_c."""
    if features.channels != params.channels:
        raise ValidationError(
            f"channel mismatch: {features.channels} features vs {params.channels} params")
    g = params.gamma[:, None, None, None]
    b = params.beta[:, None, None, None]
    return FeatureGrid(features.data * (1.0 + g) + b)


def adapter(embedding: Embedding, weights: AdapterWeights, channels: int) -> FilmParams:
    """Map an embedding to FiLM scale/shift for a given channel count."""
    if weights.channels != channels:
        raise ValidationError(
            f"adapter sized for {weights.channels} channels, requested {channels}")
    out = weights.matrix @ embedding.values.astype(np.float64) + weights.bias
    return FilmParams(out[:channels], out[channels:])


def mean_embedding(embeddings) -> Embedding:
    """Combine the available prompt embeddings by averaging."""
    embeddings = list(embeddings)
    if not embeddings:
        raise ValidationError("no embeddings given")
    stack = np.stack([e.values for e in embeddings])
    return Embedding(stack.mean(axis=0), source=embeddings[0].source)


def pseudo_embedding(text: str, source: str = "anatomy", salt: int = 0) -> Embedding:
    """Deterministic stand-in for a real text encoder.

    Expands a keyed blake2b hash of the prompt into 512 values in [-1, 1)
    and normalizes to unit length; identical text always yields the same
    vector on every platform.
    """
    if not text:
        raise ValidationError("prompt text is empty")
    key = text.encode("utf-8")
    vals = np.empty(EMBED_DIM, dtype=np.float64)
    i = 0
    block = 0
    while i < EMBED_DIM:
        h = hashlib.blake2b(key, digest_size=64,
                            salt=struct.pack("<QQ", salt & (2**64 - 1), block))
        for (word,) in struct.iter_unpack("<Q", h.digest()):
            if i >= EMBED_DIM:
                break
            vals[i] = word / 2.0**63 - 1.0
            i += 1
        block += 1
    norm = np.linalg.norm(vals)
    return Embedding((vals / norm).astype(np.float32), source=source)


# ---------------------------------------------------------------------------
# file formats

def load_embedding(path) -> Embedding:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("dim") != EMBED_DIM:
        raise ValidationError(f"embedding file {path}: dim must be {EMBED_DIM}")
    return Embedding(np.asarray(doc["values"], dtype=np.float32),
                     source=doc.get("source", "anatomy"))


def save_embedding(path, emb: Embedding) -> None:
    doc = {"source": emb.source, "dim": EMBED_DIM,
           "values": [float(v) for v in emb.values]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_adapter(path) -> AdapterWeights:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return AdapterWeights(np.asarray(doc["matrix"], dtype=np.float64),
                          np.asarray(doc["bias"], dtype=np.float64))


def save_adapter(path, w: AdapterWeights) -> None:
    doc = {"matrix": [[float(v) for v in row] for row in w.matrix],
           "bias": [float(v) for v in w.bias]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
