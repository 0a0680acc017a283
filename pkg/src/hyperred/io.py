"""Binary matrix container and delimited-record helpers.

Matrix container layout (bit-exact round trip):

- magic ``HRSNAP1\\0`` (8 bytes)
- ``n`` rows, ``l`` columns as little-endian u64
- ``n * l`` little-endian f64 values, column-major
- UTF-8 JSON trailer (provenance / sidecar payload) to end of file

Continuation records are exported as CSV with the fixed header
``step,load_factor,u_control_mm,F_reaction_N,iters,t_assembly_s,t_solve_s``;
floats are written with ``repr`` so identical runs produce identical
bytes (timing columns excepted, which depend on the wall clock).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"HRSNAP1\x00"

RECORD_HEADER = "step,load_factor,u_control_mm,F_reaction_N,iters,t_assembly_s,t_solve_s"


class SnapshotFormatError(IOError):
    """Malformed matrix container."""


def write_matrix(path, matrix: np.ndarray, trailer: dict | None = None) -> None:
    matrix = np.asarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise SnapshotFormatError("container stores 2d matrices only")
    n, l = matrix.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", n, l))
        fh.write(np.asfortranarray(matrix).tobytes(order="F"))
        fh.write(json.dumps(trailer or {}, sort_keys=True).encode("utf-8"))


def read_matrix(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic")
    n, l = struct.unpack_from("<QQ", blob, len(MAGIC))
    start = len(MAGIC) + 16
    nbytes = 8 * n * l
    if len(blob) < start + nbytes:
        raise SnapshotFormatError(f"{path}: truncated payload")
    data = np.frombuffer(blob, dtype="<f8", count=n * l, offset=start)
    matrix = data.reshape((n, l), order="F").copy()
    trailer = json.loads(blob[start + nbytes:].decode("utf-8") or "{}")
    return matrix, trailer


def format_float(x: float) -> str:
    return repr(float(x))


def write_record_csv(path, rows: list[dict]) -> None:
    """Write continuation rows (dicts with the RECORD_HEADER fields)."""
    lines = [RECORD_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                [
                    str(int(row["step"])),
                    format_float(row["load_factor"]),
                    format_float(row["u_control_mm"]),
                    format_float(row["F_reaction_N"]),
                    str(int(row["iters"])),
                    format_float(row["t_assembly_s"]),
                    format_float(row["t_solve_s"]),
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_record_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != RECORD_HEADER:
        raise SnapshotFormatError(f"{path}: unexpected record header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(
            {
                "step": int(parts[0]),
                "load_factor": float(parts[1]),
                "u_control_mm": float(parts[2]),
                "F_reaction_N": float(parts[3]),
                "iters": int(parts[4]),
                "t_assembly_s": float(parts[5]),
                "t_solve_s": float(parts[6]),
            }
        )
    return rows


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
