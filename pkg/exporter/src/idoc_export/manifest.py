"""Export manifest schema and validation.

JSON layout:
    {"model_ref": str | null,
     "aggregation": "class-token" | "patch-average" | null,
     "output_path": str | null,
     "items": [{"id": str, "image_path": str, "bbox": [x, y, w, h]?}]}

CLI flags override the nullable header fields. Region ids follow the
engine's "<page_id>#<region_index>" convention when the manifest comes from
`docspot build-index --export-manifest`; query manifests use plain ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

AGGREGATIONS = ("class-token", "patch-average")
_AGG_ALIASES = {"class-token": "class-token", "patch-avg": "patch-average",
                "patch-average": "patch-average"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestItem:
    id: str
    image_path: str
    bbox: tuple[int, int, int, int] | None


@dataclass
class ExportManifest:
    items: list[ManifestItem]
    model_ref: str | None
    aggregation: str | None
    output_path: str | None


def normalize_aggregation(value: str) -> str:
    if value not in _AGG_ALIASES:
        raise ManifestError(
            f"aggregation must be one of class-token|patch-avg, got '{value}'"
        )
    return _AGG_ALIASES[value]


def load_manifest(path: Path | str) -> ExportManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: '{path}'")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest '{path}' is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ManifestError(f"manifest '{path}' must hold an object with an items list")

    items: list[ManifestItem] = []
    seen: set[str] = set()
    for i, row in enumerate(doc["items"]):
        rid = row.get("id")
        image_path = row.get("image_path")
        if not isinstance(rid, str) or not rid:
            raise ManifestError(f"items[{i}]: missing id")
        if rid in seen:
            raise ManifestError(f"duplicate id '{rid}'")
        seen.add(rid)
        if not isinstance(image_path, str) or not image_path:
            raise ManifestError(f"items[{i}] ('{rid}'): missing image_path")
        bbox = row.get("bbox")
        if bbox is not None:
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise ManifestError(f"items[{i}] ('{rid}'): bbox must be [x, y, w, h]")
            x, y, w, h = (int(v) for v in bbox)
            if w <= 0 or h <= 0:
                raise ManifestError(f"items[{i}] ('{rid}'): bbox extent must be positive")
            bbox = (x, y, w, h)
        items.append(ManifestItem(rid, image_path, bbox))

    agg = doc.get("aggregation")
    if agg is not None:
        agg = normalize_aggregation(agg)
    return ExportManifest(
        items=items,
        model_ref=doc.get("model_ref"),
        aggregation=agg,
        output_path=doc.get("output_path"),
    )
