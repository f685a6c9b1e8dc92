"""On-disk formats: QBS1 spectra, QBD1 datasets, CSV tables, PGM previews.

All writes go through :func:`atomic_write` (temp file in the target
directory, then rename). Provenance lives in a JSON sidecar next to each
output (``<path>.meta.json``) holding the resolved config and its digest,
so the binary layouts stay exactly as specified.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .imaging import KIND_CODES, Dataset
from .spectral_core import EigenSolution, basis_dimension


class FormatError(ValueError):
    """File is not in the expected format."""


class DigestMismatch(RuntimeError):
    """Chained artifacts were produced under incompatible configurations."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_sidecar(path, config: dict, **extra) -> str:
    digest = config_digest(config)
    meta = {"config": config, "digest": digest, **extra}
    text = json.dumps(meta, sort_keys=True, indent=1, default=str) + "\n"
    atomic_write(sidecar_path(path), text.encode())
    return digest


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text())


# ---------------------------------------------------------------------------
# QBS1: "QBS1" | version u32 | inv_kappa f64 | cutoff u32 | parity i8 |
#       num_states u32 | basis_dim u32 | flags u32 | energies f64[n] |
#       parities i8[n] | coefficients f64[n][basis_dim] (flags bit 0)
# ---------------------------------------------------------------------------

SPECTRUM_MAGIC = b"QBS1"
SPECTRUM_VERSION = 1
_QBS_HEAD = struct.Struct("<IdIbIII")


def spectrum_bytes(sol: EigenSolution) -> bytes:
    n = len(sol)
    dim = basis_dimension(sol.cutoff)
    flags = 1 if sol.coefficients is not None else 0
    parts = [SPECTRUM_MAGIC,
             _QBS_HEAD.pack(SPECTRUM_VERSION, sol.inv_kappa, sol.cutoff, sol.parity_block,
                            n, dim, flags),
             np.ascontiguousarray(sol.energies, "<f8").tobytes(),
             np.ascontiguousarray(sol.parities, "i1").tobytes()]
    if flags & 1:
        parts.append(np.ascontiguousarray(sol.coefficients, "<f8").tobytes())
    return b"".join(parts)


def write_spectrum(path, sol: EigenSolution) -> None:
    atomic_write(path, spectrum_bytes(sol))


def _block_rank(parities: np.ndarray) -> np.ndarray:
    rank = np.empty(parities.size, dtype=np.int64)
    for p in np.unique(parities):
        sel = parities == p
        rank[sel] = np.arange(sel.sum())
    return rank


def parse_spectrum(data: bytes, with_coefficients: bool = True) -> EigenSolution:
    if data[:4] != SPECTRUM_MAGIC or len(data) < 4 + _QBS_HEAD.size:
        raise FormatError("not a QBS1 spectrum file")
    version, ik, c, parity, n, dim, flags = _QBS_HEAD.unpack_from(data, 4)
    if version != SPECTRUM_VERSION:
        raise FormatError(f"unsupported spectrum version {version}")
    if dim != basis_dimension(c):
        raise FormatError("basis dimension does not match cutoff")
    off = 4 + _QBS_HEAD.size
    want = off + 9 * n + (8 * n * dim if flags & 1 else 0)
    if len(data) != want:
        raise FormatError(f"spectrum file has {len(data)} bytes, expected {want}")
    e = np.frombuffer(data, "<f8", n, off).astype(np.float64)
    p = np.frombuffer(data, "i1", n, off + 8 * n).astype(np.int8)
    coeffs = None
    if flags & 1 and with_coefficients:
        coeffs = np.frombuffer(data, "<f8", n * dim, off + 9 * n).reshape(n, dim).copy()
    return EigenSolution(ik, c, e, p, coeffs, parity, _block_rank(p))


def read_spectrum(path, with_coefficients: bool = True) -> EigenSolution:
    return parse_spectrum(Path(path).read_bytes(), with_coefficients)


# ---------------------------------------------------------------------------
# QBD1: "QBD1" | version u32 | R u32 | count u32 | kind u8 | split_seed u64 |
#       records {label u8, inv_kappa f64, state_index u32, pixels f32[R*R]} |
#       n_train u32, train u32[] | n_test u32, test u32[]
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"QBD1"
DATASET_VERSION = 1
_QBD_HEAD = struct.Struct("<IIIBQ")
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def _record_dtype(R: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("inv_kappa", "<f8"), ("state_index", "<u4"),
                     ("pixels", "<f4", (R * R,))])


def dataset_bytes(ds: Dataset) -> bytes:
    n, R = len(ds), ds.resolution
    rec = np.zeros(n, dtype=_record_dtype(R))
    rec["label"] = ds.labels
    rec["inv_kappa"] = ds.inv_kappa
    rec["state_index"] = ds.state_index
    rec["pixels"] = np.asarray(ds.images, dtype=np.float32).reshape(n, R * R)
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(_QBD_HEAD.pack(DATASET_VERSION, R, n, KIND_CODES[ds.kind], ds.split_seed))
    out.write(rec.tobytes())
    for idx in (ds.train, ds.test):
        out.write(struct.pack("<I", len(idx)))
        out.write(np.asarray(idx, "<u4").tobytes())
    return out.getvalue()


def write_dataset(path, ds: Dataset) -> None:
    atomic_write(path, dataset_bytes(ds))


def parse_dataset(data: bytes) -> Dataset:
    if data[:4] != DATASET_MAGIC or len(data) < 4 + _QBD_HEAD.size:
        raise FormatError("not a QBD1 dataset file")
    version, R, n, kind, seed = _QBD_HEAD.unpack_from(data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if kind not in _KIND_NAMES:
        raise FormatError(f"unknown content kind {kind}")
    dt = _record_dtype(R)
    off = 4 + _QBD_HEAD.size
    try:
        rec = np.frombuffer(data, dt, n, off)
        off += n * dt.itemsize
        lists = []
        for _ in range(2):
            (m,) = struct.unpack_from("<I", data, off)
            lists.append(np.frombuffer(data, "<u4", m, off + 4).astype(np.int64))
            off += 4 + 4 * m
    except (ValueError, struct.error) as exc:
        raise FormatError(f"truncated dataset file: {exc}") from exc
    if off != len(data):
        raise FormatError("trailing bytes after dataset footer")
    return Dataset(rec["pixels"].reshape(n, R, R).copy(), rec["label"].copy(),
                   rec["inv_kappa"].astype(np.float64), rec["state_index"].copy(),
                   lists[0], lists[1], int(seed), _KIND_NAMES[kind])


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV and PGM
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, header has {len(columns)}")
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows) -> None:
    atomic_write(path, csv_text(columns, rows).encode())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


HISTOGRAM_COLUMNS = ("bin_left", "bin_right", "density")
DELTA_MIN_COLUMNS = ("N", "delta_min")
MASS_SCAN_COLUMNS = ("kappa", "acc_mean", "acc_min", "acc_max")
ALPHA_SCAN_COLUMNS = ("alpha", "acc_overall", "acc_k1", "acc_k2", "acc_k5", "acc_kinf")
NOISE_SCAN_COLUMNS = ("sigma", "acc_integrable", "acc_nonintegrable", "acc_avg")
LOO_COLUMNS = ("beta_first_energy", "beta_size", "f1_diff")
ATTACK_COLUMNS = ("state_index", "iterations", "success", "linf_rel")


def pgm_bytes(values) -> bytes:
    """8-bit binary PGM, scaled so the grid maximum maps to 255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("PGM export needs a 2-D grid")
    v = np.abs(v)
    top = v.max()
    px = np.zeros(v.shape, np.uint8) if top <= 0 else np.rint(v / top * 255).astype(np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def write_pgm(path, values) -> None:
    atomic_write(path, pgm_bytes(values))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)
