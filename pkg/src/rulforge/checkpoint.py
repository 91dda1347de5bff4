"""Checkpoint files: a text manifest plus one little-endian float32 blob.

Manifest layout (tab separated)::

    format  rulforge-ckpt-v1
    blob    <file name of the blob, relative to the manifest>
    <name>  <shape as AxBxC>  <element offset>  float32  <param|buffer>  <trainable 0/1>
    ...

Entries appear in lexicographic name order, which is also the order of the
concatenated arrays in the blob.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .tensor import ParamStore

FORMAT_VERSION = "rulforge-ckpt-v1"


def save_checkpoint(params: ParamStore, path) -> tuple[Path, Path]:
    """Write ``<path>`` (manifest) and ``<path>.bin`` (blob)."""
    manifest = Path(path)
    blob = manifest.with_name(manifest.name + ".bin")
    lines = [f"format\t{FORMAT_VERSION}", f"blob\t{blob.name}"]
    chunks = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape)
        kind = "buffer" if params.is_buffer(name) else "param"
        trainable = int(params.is_trainable(name))
        lines.append(f"{name}\t{shape}\t{offset}\tfloat32\t{kind}\t{trainable}")
        chunks.append(arr.reshape(-1))
        offset += arr.size
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.write_bytes(data.tobytes())
    return manifest, blob


def load_checkpoint(path) -> ParamStore:
    manifest = Path(path)
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or lines[0].split("\t") != ["format", FORMAT_VERSION]:
        raise ParseError(f"{manifest}: not a {FORMAT_VERSION} manifest")
    head = lines[1].split("\t")
    if head[0] != "blob" or len(head) != 2:
        raise ParseError(f"{manifest}:2: expected 'blob<TAB>file'")
    data = np.frombuffer((manifest.parent / head[1]).read_bytes(), dtype="<f4")
    params = ParamStore()
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6 or fields[3] != "float32":
            raise ParseError(f"{manifest}:{lineno}: malformed entry {line!r}")
        name, shape_s, offset_s, _, kind, trainable = fields
        shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        offset = int(offset_s)
        count = int(np.prod(shape)) if shape else 1
        if offset + count > data.size:
            raise ParseError(f"{manifest}:{lineno}: {name} runs past the end of the blob")
        arr = data[offset:offset + count].astype(np.float32).reshape(shape)
        params.add(name, arr, buffer=kind == "buffer", trainable=trainable == "1")
    return params
