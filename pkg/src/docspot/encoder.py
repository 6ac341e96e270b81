"""Patch embeddings: built-in histogram extractors, cosine similarity, and
the binary embedding-file format used to bridge external deep encoders.

Every embedding is a fixed-dimension float32 vector with unit L2 norm.
Patches with zero feature mass (e.g. a uniform patch under the gradient
extractor) map deterministically to the first basis vector instead of
erroring, so blank regions stay indexable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import cv2
import numpy as np

from .errors import DataError, EmbeddingFileError, EncoderMismatchError

CANONICAL_PATCH = 224  # bilinear-resize target before feature extraction

EMBEDDING_MAGIC = b"IDOCEMB1"

ENCODER_KINDS = ("color-hist", "grad-hist", "external")


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray  # float32, unit L2 norm
    encoder_id: str

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass
class EncoderSpec:
    kind: str = "color-hist"
    color_bins: int = 4
    orientation_bins: int = 9
    spatial_cells: int = 2
    external_path: str | None = None
    external_dim: int | None = None
    external_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise DataError(f"unknown encoder kind '{self.kind}'")
        if self.kind == "color-hist" and self.color_bins < 1:
            raise DataError("color-hist needs >= 1 bin per channel")
        if self.kind == "grad-hist" and (self.orientation_bins < 1 or self.spatial_cells < 1):
            raise DataError("grad-hist needs >= 1 orientation bin and spatial cell")

    @property
    def dim(self) -> int:
        if self.kind == "color-hist":
            return self.color_bins**3
        if self.kind == "grad-hist":
            return self.orientation_bins * self.spatial_cells**2
        if self.external_dim is None:
            raise DataError("external encoder dim unknown until its file is loaded")
        return self.external_dim

    @property
    def encoder_id(self) -> str:
        if self.kind == "color-hist":
            return f"color-hist:b{self.color_bins}"
        if self.kind == "grad-hist":
            return f"grad-hist:o{self.orientation_bins}c{self.spatial_cells}"
        if self.external_id is None:
            raise DataError("external encoder id unknown until its file is loaded")
        return self.external_id

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "color_bins": self.color_bins,
            "orientation_bins": self.orientation_bins,
            "spatial_cells": self.spatial_cells,
            "external_path": self.external_path,
            "external_dim": self.external_dim,
            "external_id": self.external_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(
            kind=d["kind"],
            color_bins=d.get("color_bins", 4),
            orientation_bins=d.get("orientation_bins", 9),
            spatial_cells=d.get("spatial_cells", 2),
            external_path=d.get("external_path"),
            external_dim=d.get("external_dim"),
            external_id=d.get("external_id"),
        )


def unit_or_e1(vec: np.ndarray) -> np.ndarray:
    """L2-normalize in float64; zero vectors fall back to e1."""
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 0.0 or not math.isfinite(norm):
        out = np.zeros(v.shape[0], dtype=np.float32)
        out[0] = 1.0
        return out
    return (v / norm).astype(np.float32)


def _resize_canonical(patch: np.ndarray) -> np.ndarray:
    return cv2.resize(
        patch, (CANONICAL_PATCH, CANONICAL_PATCH), interpolation=cv2.INTER_LINEAR
    )


def _color_histogram(patch: np.ndarray, bins: int) -> np.ndarray:
    idx = (patch.astype(np.int64) * bins) // 256
    flat = (idx[..., 0] * bins + idx[..., 1]) * bins + idx[..., 2]
    return np.bincount(flat.ravel(), minlength=bins**3).astype(np.float64)


def _gradient_histogram(patch: np.ndarray, orientation_bins: int, cells: int) -> np.ndarray:
    gray = cv2.cvtColor(patch, cv2.COLOR_RGB2GRAY).astype(np.float32)
    dx = cv2.Sobel(gray, cv2.CV_32F, 1, 0, ksize=3)
    dy = cv2.Sobel(gray, cv2.CV_32F, 0, 1, ksize=3)
    # np.hypot, not cv2.magnitude: the cv2 kernel is not bit-deterministic
    # under concurrent calls, which breaks the any-thread-count contract
    mag = np.hypot(dx, dy).astype(np.float64)
    ang = np.degrees(np.arctan2(dy, dx)) % 180.0
    ori = np.clip((ang * orientation_bins / 180.0).astype(np.int64), 0, orientation_bins - 1)
    h, w = gray.shape
    cy = (np.arange(h) * cells) // h
    cx = (np.arange(w) * cells) // w
    cell_idx = cy[:, None] * cells + cx[None, :]
    flat = cell_idx * orientation_bins + ori
    return np.bincount(
        flat.ravel(), weights=mag.ravel(), minlength=orientation_bins * cells**2
    )


def encode(patch: np.ndarray, spec: EncoderSpec) -> Embedding:
    """Extract a unit-norm feature vector from an RGB patch."""
    if spec.kind == "external":
        raise DataError("external encoder does not encode patches; use load_embeddings")
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] == 0 or patch.shape[1] == 0:
        raise DataError(f"patch must be non-empty HxWx3, got shape {patch.shape}")
    resized = _resize_canonical(patch.astype(np.uint8))
    if spec.kind == "color-hist":
        feats = _color_histogram(resized, spec.color_bins)
    else:
        feats = _gradient_histogram(resized, spec.orientation_bins, spec.spatial_cells)
    return Embedding(unit_or_e1(feats), spec.encoder_id)


def cosine(a: Embedding, b: Embedding) -> float:
    """Dot product of unit vectors, clamped to [-1, 1] against rounding."""
    if a.encoder_id != b.encoder_id:
        raise EncoderMismatchError(
            f"encoder mismatch: '{a.encoder_id}' vs '{b.encoder_id}'"
        )
    if a.dim != b.dim:
        raise EncoderMismatchError(f"dim mismatch: {a.dim} vs {b.dim}")
    return max(-1.0, min(1.0, float(np.dot(a.vector, b.vector))))


# --- binary embedding file ---------------------------------------------------
#
# Little-endian layout:
#   magic        8 bytes  "IDOCEMB1"
#   encoder_id   u16 length + UTF-8 bytes
#   dim          u32
#   count        u64
#   records      count x (u16 id length + UTF-8 id + dim x f32)


def write_embeddings(
    path: Path | str,
    encoder_id: str,
    dim: int,
    items: Iterable[tuple[str, np.ndarray]],
) -> int:
    """Write (id, vector) pairs in file order; returns the record count."""
    items = list(items)
    eid = encoder_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<H", len(eid)))
        fh.write(eid)
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(items)))
        for rec_id, vec in items:
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (dim,):
                raise DataError(f"record '{rec_id}': vector shape {vec.shape} != ({dim},)")
            rid = rec_id.encode("utf-8")
            fh.write(struct.pack("<H", len(rid)))
            fh.write(rid)
            fh.write(vec.tobytes())
    return len(items)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EmbeddingFileError(f"truncated embedding file while reading {what}")
    return data


def read_embedding_header(fh: BinaryIO) -> tuple[str, int, int]:
    magic = _read_exact(fh, 8, "magic")
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFileError(
            f"bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}"
        )
    (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "encoder_id length"))
    encoder_id = _read_exact(fh, id_len, "encoder_id").decode("utf-8")
    (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dim"))
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, "count"))
    if dim == 0:
        raise EmbeddingFileError("embedding dim must be > 0")
    return encoder_id, int(dim), int(count)


def load_embeddings(
    path: Path | str,
    expect_dim: int | None = None,
    expect_encoder_id: str | None = None,
) -> dict[str, Embedding]:
    """Read an embedding file into an id -> Embedding map (file order).

    Every vector is re-checked for unit norm within 1e-3 and re-normalized
    to 1e-6 precision.
    """
    path = Path(path)
    if not path.is_file():
        raise EmbeddingFileError(f"embedding file not found: '{path}'")
    out: dict[str, Embedding] = {}
    with open(path, "rb") as fh:
        encoder_id, dim, count = read_embedding_header(fh)
        if expect_dim is not None and dim != expect_dim:
            raise EmbeddingFileError(
                f"dim mismatch: file has {dim}, declared spec wants {expect_dim}"
            )
        if expect_encoder_id is not None and encoder_id != expect_encoder_id:
            raise EmbeddingFileError(
                f"encoder_id mismatch: file has '{encoder_id}', expected '{expect_encoder_id}'"
            )
        rec_bytes = 4 * dim
        for i in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, f"record {i} id length"))
            rec_id = _read_exact(fh, id_len, f"record {i} id").decode("utf-8")
            if rec_id in out:
                raise EmbeddingFileError(f"duplicate id '{rec_id}'")
            vec = np.frombuffer(
                _read_exact(fh, rec_bytes, f"record '{rec_id}' vector"), dtype="<f4"
            ).astype(np.float32)
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFileError(f"record '{rec_id}': non-finite component")
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > 1e-3:
                raise EmbeddingFileError(
                    f"record '{rec_id}': norm {norm:.6f} outside 1 +/- 1e-3"
                )
            # renormalize only when needed so engine-written vectors
            # round-trip f32-exact
            if abs(norm - 1.0) > 1e-6:
                vec = unit_or_e1(vec)
            out[rec_id] = Embedding(vec, encoder_id)
        if fh.read(1):
            raise EmbeddingFileError(f"trailing bytes after {count} records in '{path}'")
    return out
