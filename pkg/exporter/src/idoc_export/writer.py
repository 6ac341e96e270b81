"""Binary embedding file writer (the engine's interchange format).

Little-endian layout:
    magic        8 bytes  "IDOCEMB1"
    encoder_id   u16 length + UTF-8 bytes
    dim          u32
    count        u64
    records      count x (u16 id length + UTF-8 id + dim x f32)

Implemented here independently of the engine: the byte layout is the
contract between the two packages.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"IDOCEMB1"


def write_embedding_file(
    path: Path | str,
    encoder_id: str,
    dim: int,
    items: Iterable[tuple[str, np.ndarray]],
) -> int:
    """Write records in manifest order; complete-or-absent via atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = list(items)
    eid = encoder_id.encode("utf-8")

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<H", len(eid)))
            fh.write(eid)
            fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<Q", len(items)))
            for rec_id, vec in items:
                vec = np.asarray(vec, dtype="<f4")
                if vec.shape != (dim,):
                    raise ValueError(
                        f"record '{rec_id}': vector shape {vec.shape} != ({dim},)"
                    )
                rid = rec_id.encode("utf-8")
                fh.write(struct.pack("<H", len(rid)))
                fh.write(rid)
                fh.write(vec.tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return len(items)
