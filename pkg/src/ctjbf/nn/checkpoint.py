"""NNWT1 weight checkpoint files.

Layout::

    NNWT1\n
    layers <n>\n
    layer <kind> <tensor-count> <shape> <shape> ...\n   (one line per layer)
    end\n
    <little-endian float64 values, tensor after tensor in declaration order>

Shapes are comma-joined dimension lists ('-' for layers without weights).
Loading validates the table against the target network's declaration, so a
checkpoint cannot be silently applied to a different topology.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError

MAGIC = b"NNWT1\n"


def save_entries(entries, path: str | os.PathLike) -> None:
    """Write (kind, [tensors]) layer entries to an NNWT1 file."""
    lines = [f"layers {len(entries)}"]
    blobs = []
    for kind, tensors in entries:
        shapes = " ".join(",".join(str(d) for d in t.shape) for t in tensors) or "-"
        lines.append(f"layer {kind} {len(tensors)} {shapes}")
        for t in tensors:
            blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(lines) + "\nend\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_entries(entries, path: str | os.PathLike) -> None:
    """Fill the tensors of (kind, [tensors]) entries from an NNWT1 file."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not an NNWT1 checkpoint")
        header = fh.readline().decode("ascii", "replace").split()
        if len(header) != 2 or header[0] != "layers":
            raise FormatError(f"{path}: bad layer-count line {header}")
        count = int(header[1])
        if count != len(entries):
            raise FormatError(
                f"{path}: checkpoint has {count} layers, network declares {len(entries)}"
            )
        table = []
        for i in range(count):
            parts = fh.readline().decode("ascii", "replace").split()
            if len(parts) < 3 or parts[0] != "layer":
                raise FormatError(f"{path}: bad layer line {parts}")
            kind, n = parts[1], int(parts[2])
            shapes = [
                tuple(int(d) for d in s.split(",")) for s in parts[3:] if s != "-"
            ]
            if len(shapes) != n:
                raise FormatError(f"{path}: layer {i} declares {n} tensors, lists {len(shapes)}")
            table.append((kind, shapes))
        if fh.readline() != b"end\n":
            raise FormatError(f"{path}: missing end marker")
        for i, ((kind, tensors), (ck_kind, ck_shapes)) in enumerate(zip(entries, table)):
            if kind != ck_kind or [t.shape for t in tensors] != ck_shapes:
                raise FormatError(
                    f"{path}: layer {i} mismatch, checkpoint ({ck_kind} {ck_shapes}) "
                    f"vs network ({kind} {[t.shape for t in tensors]})"
                )
            for t in tensors:
                raw = fh.read(8 * t.size)
                if len(raw) < 8 * t.size:
                    raise FormatError(f"{path}: truncated payload at layer {i}")
                t.data[...] = np.frombuffer(raw, dtype="<f8").reshape(t.shape)


def save_network(net, path) -> None:
    save_entries(net.entries(), path)


def load_network(net, path) -> None:
    load_entries(net.entries(), path)
