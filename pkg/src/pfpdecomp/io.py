"""Binary and text file formats.

All binary formats are little-endian. Layouts:

Recording (``.semg``)::

    b"SEMG" | u32 version=1 | u32 M | u32 T | f64 sample_rate | u32 rows | u32 cols
    | M bytes channel mask (0/1) | M*T f32, channel-major

Template set (``.muap``)::

    b"MUAP" | u32 version=1 | u32 M | u32 n_mus | u32 L | f64 sample_rate | u32 rows | u32 cols
    | n_mus u32 MU ids | M*n_mus*L f32, ordered [channel][mu][lag]

Vector bank (``.mubk``)::

    b"MUBK" | u32 version=1 | f64 sample_rate | u32 K | u32 L | u32 N
    | N*D f64 composite vectors | N records of (f64 mu_id, f64 cov_amp, f64 cov_isi)

``D`` is the extended dimension (usable channels times K); it is implied by the file
size. Undefined CoV values are stored as NaN.

Spike trains are text: a ``# sample_rate=<Hz>`` header, then ``<mu_id>,<sample_index>``
lines.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import Recording, SpikeTrain

VERSION = 1
_REC_HEADER = struct.Struct("<4sIIIdII")
_TPL_HEADER = struct.Struct("<4sIIIIdII")
_BANK_HEADER = struct.Struct("<4sIdIII")


class FormatError(ValueError):
    """Raised when a file does not follow the expected layout."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _check_magic(path, buf: bytes, magic: bytes, size: int):
    if len(buf) < size:
        raise FormatError(path, "file too short for header")
    if buf[:4] != magic:
        raise FormatError(path, f"bad magic {buf[:4]!r}, expected {magic!r}")


def write_recording(path, rec: Recording) -> None:
    m, t = rec.samples.shape
    rows, cols = rec.grid_shape
    mask = rec.channel_mask & ~rec.repaired
    with open(path, "wb") as f:
        f.write(_REC_HEADER.pack(b"SEMG", VERSION, m, t, rec.sample_rate, rows, cols))
        f.write(mask.astype(np.uint8).tobytes())
        f.write(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())


def read_recording(path) -> Recording:
    buf = _read(path)
    _check_magic(path, buf, b"SEMG", _REC_HEADER.size)
    _, version, m, t, fs, rows, cols = _REC_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(path, f"unsupported version {version}")
    off = _REC_HEADER.size
    expected = off + m + 4 * m * t
    if len(buf) != expected:
        raise FormatError(path, f"size {len(buf)} does not match header (expected {expected})")
    mask = np.frombuffer(buf, dtype=np.uint8, count=m, offset=off).astype(bool)
    samples = np.frombuffer(buf, dtype="<f4", count=m * t, offset=off + m).reshape(m, t)
    try:
        return Recording(samples.astype(np.float32), fs, mask, (rows, cols))
    except ValueError as exc:
        raise FormatError(path, str(exc)) from exc


def write_templates(path, templates: np.ndarray, mu_ids: Iterable[int], sample_rate: float,
                    grid_shape: tuple[int, int]) -> None:
    """Write templates with shape (n_mus, M, L)."""
    templates = np.asarray(templates)
    n_mus, m, length = templates.shape
    ids = np.asarray(list(mu_ids), dtype="<u4")
    if ids.size != n_mus:
        raise ValueError("one MU id per template is required")
    with open(path, "wb") as f:
        f.write(_TPL_HEADER.pack(b"MUAP", VERSION, m, n_mus, length, float(sample_rate), *grid_shape))
        f.write(ids.tobytes())
        f.write(np.ascontiguousarray(templates.transpose(1, 0, 2), dtype="<f4").tobytes())


def read_templates(path) -> tuple[np.ndarray, np.ndarray, float, tuple[int, int]]:
    """Return (templates (n_mus, M, L), mu_ids, sample_rate, grid_shape)."""
    buf = _read(path)
    _check_magic(path, buf, b"MUAP", _TPL_HEADER.size)
    _, version, m, n_mus, length, fs, rows, cols = _TPL_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(path, f"unsupported version {version}")
    off = _TPL_HEADER.size
    expected = off + 4 * n_mus + 4 * m * n_mus * length
    if len(buf) != expected:
        raise FormatError(path, f"size {len(buf)} does not match header (expected {expected})")
    ids = np.frombuffer(buf, dtype="<u4", count=n_mus, offset=off).astype(np.int64)
    data = np.frombuffer(buf, dtype="<f4", count=m * n_mus * length, offset=off + 4 * n_mus)
    templates = data.reshape(m, n_mus, length).transpose(1, 0, 2).astype(np.float64)
    return templates, ids, fs, (rows, cols)


def write_spike_trains(path, trains: Iterable[SpikeTrain], sample_rate: float) -> None:
    lines = [f"# sample_rate={sample_rate!r}"]
    for train in trains:
        lines.extend(f"{train.mu_id},{int(s)}" for s in train.firing_samples)
    Path(path).write_text("\n".join(lines) + "\n")


def read_spike_trains(path) -> tuple[list[SpikeTrain], float]:
    """Return trains sorted by MU id, and the sample rate from the header."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# sample_rate="):
        raise FormatError(path, "missing '# sample_rate=<Hz>' header")
    try:
        fs = float(text[0].split("=", 1)[1])
    except ValueError as exc:
        raise FormatError(path, f"bad sample rate in header: {text[0]!r}") from exc
    firings: dict[int, list[int]] = {}
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            mu, idx = (int(v) for v in line.split(","))
        except ValueError as exc:
            raise FormatError(path, f"line {lineno}: expected '<mu_id>,<sample_index>', got {line!r}") from exc
        firings.setdefault(mu, []).append(idx)
    trains = [SpikeTrain(mu, np.sort(np.asarray(v))) for mu, v in sorted(firings.items())]
    return trains, fs


def write_bank_arrays(path, vectors: np.ndarray, mu_ids, cov_amp, cov_isi,
                      sample_rate: float, k: int, length: int) -> None:
    vectors = np.asarray(vectors, dtype="<f8")
    n, d = vectors.shape
    meta = np.column_stack([
        np.asarray(mu_ids, dtype=np.float64),
        np.asarray(cov_amp, dtype=np.float64),
        np.asarray(cov_isi, dtype=np.float64),
    ]).astype("<f8")
    with open(path, "wb") as f:
        f.write(_BANK_HEADER.pack(b"MUBK", VERSION, float(sample_rate), k, length, n))
        f.write(np.ascontiguousarray(vectors).tobytes())
        f.write(np.ascontiguousarray(meta).tobytes())


def read_bank_arrays(path) -> dict:
    buf = _read(path)
    _check_magic(path, buf, b"MUBK", _BANK_HEADER.size)
    _, version, fs, k, length, n = _BANK_HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(path, f"unsupported version {version}")
    off = _BANK_HEADER.size
    payload = len(buf) - off - 24 * n
    if n == 0 or payload <= 0 or payload % (8 * n):
        raise FormatError(path, f"size {len(buf)} is inconsistent with N={n}")
    d = payload // (8 * n)
    vectors = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    meta = np.frombuffer(buf, dtype="<f8", count=3 * n, offset=off + 8 * n * d).reshape(n, 3)
    return {
        "sample_rate": fs, "k": k, "length": length, "vectors": vectors,
        "mu_ids": meta[:, 0].astype(np.int64), "cov_amp": meta[:, 1].copy(), "cov_isi": meta[:, 2].copy(),
    }
