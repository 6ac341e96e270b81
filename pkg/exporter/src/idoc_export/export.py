"""Checkpoint loading and batch embedding export.

Model contract: `model_ref` is a TorchScript file whose forward pass maps a
float32 batch (B, 3, H, W) to a token sequence (B, 1 + n_patches, D) with
the class token first. ViT-family checkpoints (iBOT/DINOv2/CLIP vision
towers, with any low-rank adapters already merged) fit this contract via a
one-line `torch.jit.trace`/`script` export. An optional `input_size` module
attribute overrides the 224 default.

Inference is pinned deterministic: fixed seeds, single-threaded CPU math,
deterministic algorithms. Reruns of the same manifest yield byte-identical
files.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .manifest import ExportManifest, ManifestError, ManifestItem
from .writer import write_embedding_file

DEFAULT_INPUT_SIZE = 224
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


class ExportError(RuntimeError):
    pass


@dataclass
class ExportResult:
    output_path: Path
    encoder_id: str
    dim: int
    exported: int
    skipped: list[dict] = field(default_factory=list)
    sidecar_path: Path | None = None


def _pin_determinism() -> None:
    torch.manual_seed(0)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def load_model(model_ref: str) -> torch.jit.ScriptModule:
    path = Path(model_ref)
    if not path.is_file():
        raise ExportError(f"checkpoint not found: '{model_ref}'")
    try:
        model = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise ExportError(
            f"'{model_ref}' is not a loadable TorchScript checkpoint: {exc}"
        ) from exc
    model.eval()
    return model


def _load_patch(item: ManifestItem) -> np.ndarray:
    try:
        with Image.open(item.image_path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ExportError(f"undecodable image '{item.image_path}': {exc}") from exc
    if item.bbox is None:
        return arr
    x, y, w, h = item.bbox
    if x < 0 or y < 0 or x + w > arr.shape[1] or y + h > arr.shape[0]:
        raise ExportError(
            f"bbox {list(item.bbox)} outside image '{item.image_path}' "
            f"({arr.shape[1]}x{arr.shape[0]})"
        )
    return arr[y : y + h, x : x + w]


def _preprocess(patch: np.ndarray, input_size: int, mean, std) -> torch.Tensor:
    img = Image.fromarray(patch).resize((input_size, input_size), Image.BILINEAR)
    t = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)
    m = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (t - m) / s


def _aggregate(tokens: torch.Tensor, aggregation: str) -> torch.Tensor:
    if tokens.ndim != 3 or tokens.shape[1] < 2:
        raise ExportError(
            f"model must return (batch, 1+n_patches, dim) tokens, got {tuple(tokens.shape)}"
        )
    if aggregation == "class-token":
        return tokens[:, 0]
    return tokens[:, 1:].mean(dim=1)


def _unit(vec: np.ndarray) -> np.ndarray:
    v = vec.astype(np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 0.0 or not np.isfinite(norm):
        out = np.zeros(v.shape[0], dtype=np.float32)
        out[0] = 1.0
        return out
    return (v / norm).astype(np.float32)


def export_embeddings(
    manifest: ExportManifest,
    model_ref: str | None = None,
    aggregation: str | None = None,
    output_path: str | None = None,
    input_size: int | None = None,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
    batch_size: int = 16,
) -> ExportResult:
    """Encode every manifest row and write the binary embedding file.

    Undecodable images are skipped with a warning and listed in a
    `<out>.skipped.json` sidecar; any other inconsistency aborts the export.
    """
    model_ref = model_ref or manifest.model_ref
    aggregation = aggregation or manifest.aggregation
    output_path = output_path or manifest.output_path
    if not model_ref:
        raise ManifestError("no model_ref given (manifest field or --model)")
    if not aggregation:
        raise ManifestError("no aggregation given (manifest field or --agg)")
    if not output_path:
        raise ManifestError("no output path given (manifest field or --out)")
    if not manifest.items:
        raise ManifestError("manifest has no items to export")

    _pin_determinism()
    model = load_model(model_ref)
    size = input_size or int(getattr(model, "input_size", DEFAULT_INPUT_SIZE))
    encoder_id = f"{model_ref}:{aggregation}"

    batches: list[tuple[str, torch.Tensor]] = []
    skipped: list[dict] = []
    for item in manifest.items:
        try:
            patch = _load_patch(item)
        except ExportError as exc:
            if "undecodable" in str(exc):
                warnings.warn(f"skipping '{item.id}': {exc}", stacklevel=2)
                skipped.append({"id": item.id, "image_path": item.image_path,
                                "reason": str(exc)})
                continue
            raise
        batches.append((item.id, _preprocess(patch, size, mean, std)))

    if not batches:
        raise ExportError("every manifest item was skipped; nothing to export")

    records: list[tuple[str, np.ndarray]] = []
    dim: int | None = None
    with torch.no_grad():
        for start in range(0, len(batches), batch_size):
            chunk = batches[start : start + batch_size]
            x = torch.stack([t for _, t in chunk])
            tokens = model(x)
            if not isinstance(tokens, torch.Tensor):
                raise ExportError(
                    f"model returned {type(tokens).__name__}, expected a token tensor"
                )
            vecs = _aggregate(tokens, aggregation).cpu().numpy()
            if dim is None:
                dim = int(vecs.shape[1])
            for (rec_id, _), vec in zip(chunk, vecs):
                records.append((rec_id, _unit(vec)))

    assert dim is not None
    out = Path(output_path)
    write_embedding_file(out, encoder_id, dim, records)

    sidecar = None
    if skipped:
        sidecar = out.with_suffix(out.suffix + ".skipped.json")
        import json

        sidecar.write_text(json.dumps(skipped, indent=2) + "\n", encoding="utf-8")
    return ExportResult(out, encoder_id, dim, len(records), skipped, sidecar)
