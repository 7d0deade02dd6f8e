"""CIFAR-10 binary records, synthetic images, and PPM / CSV export."""

import csv
import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
PLANE = 1024
PPM_MAXVAL = 255


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Cifar10Record:
    label: int
    image: np.ndarray  # (3, 32, 32) float64 in [0, 1]


def _check_length(path, size):
    if size % RECORD_BYTES:
        raise FormatError(f"{path}: length {size} is not a multiple of {RECORD_BYTES} (truncated file?)")


def load_cifar10(path, index):
    """Read record ``index`` from a CIFAR-10 binary batch file."""
    size = os.path.getsize(path)
    _check_length(path, size)
    count = size // RECORD_BYTES
    if not 0 <= index < count:
        raise IndexError(f"{path}: record {index} out of range (file holds {count})")
    with open(path, "rb") as fh:
        fh.seek(index * RECORD_BYTES)
        raw = fh.read(RECORD_BYTES)
    return _decode(path, raw)


def _decode(path, raw):
    label = raw[0]
    if label >= 10:
        raise FormatError(f"{path}: label byte {label} >= 10")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=3 * PLANE, offset=1)
    return Cifar10Record(int(label), pixels.reshape(3, 32, 32).astype(np.float64) / 255.0)


def read_cifar10(path, limit=None):
    """All records of a batch file as ``(labels uint8 (N,), images float64 (N, 3, 32, 32))``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    _check_length(path, len(blob))
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    if limit is not None:
        raw = raw[:limit]
    labels = raw[:, 0].copy()
    if np.any(labels >= 10):
        raise FormatError(f"{path}: label byte >= 10")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return labels, images


def encode_cifar10(label, image):
    """Serialize one record; pixel values are rounded to bytes half-up."""
    if not 0 <= label < 10:
        raise FormatError(f"label {label} out of range")
    image = np.asarray(image)
    if image.shape != (3, 32, 32):
        raise FormatError(f"image must be (3, 32, 32), got {image.shape}")
    if image.dtype != np.uint8:
        image = to_bytes(image)
    return bytes([label]) + image.tobytes()


def write_cifar10(path, records):
    """Write ``(label, image)`` pairs; images may be uint8 or floats in [0, 1]."""
    with open(path, "wb") as fh:
        for label, image in records:
            fh.write(encode_cifar10(int(label), image))


def to_bytes(image):
    """Clamp to [0, 1] and quantize with round-half-up to uint8."""
    clipped = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * PPM_MAXVAL + 0.5).astype(np.uint8)


def synth_image(seed, kind="noise", size=32):
    """Deterministic (3, size, size) test image in [0, 1].

    ``noise`` is i.i.d. uniform, ``gradient-ramp`` a smooth per-channel ramp
    with a seed-dependent orientation, ``checkerboard`` alternates 1 and 0
    starting with 1 at the top-left pixel.
    """
    if kind == "noise":
        return np.random.default_rng(seed).random((3, size, size))
    if kind == "gradient-ramp":
        rng = np.random.default_rng(seed)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        out = np.empty((3, size, size))
        for c in range(3):
            a, b = rng.uniform(-1, 1, 2)
            ramp = a * xx + b * yy
            lo, hi = ramp.min(), ramp.max()
            out[c] = (ramp - lo) / (hi - lo) if hi > lo else 0.5
        return out
    if kind == "checkerboard":
        yy, xx = np.mgrid[0:size, 0:size]
        board = ((yy + xx) % 2 == 0).astype(np.float64)
        return np.broadcast_to(board, (3, size, size)).copy()
    raise ValueError(f"unknown synthetic image kind {kind!r}")


def synth_dataset(n, seed, noise=0.8):
    """Labelled synthetic images with class-dependent structure.

    Each class has a smooth random colour template; a sample is its class
    template plus i.i.d. Gaussian noise, clipped to [0, 1]. Used when CIFAR-10
    files are not available.
    """
    rng = np.random.default_rng([seed, 7])
    templates = rng.random((10, 3, 4, 4))
    templates = templates.repeat(8, axis=2).repeat(8, axis=3)
    labels = rng.integers(0, 10, n)
    images = templates[labels] + noise * rng.standard_normal((n, 3, 32, 32))
    return labels.astype(np.uint8), np.clip(images, 0.0, 1.0)


def encode_ppm(image):
    """Binary P6 bytes for a (3, H, W) float image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n{PPM_MAXVAL}\n".encode("ascii")
    return header + to_bytes(image).transpose(1, 2, 0).tobytes()


def export_ppm(image, path):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def read_ppm(path):
    """Parse a binary P6 file back to a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos + 1, count=w * h * 3)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


TRACE_HEADER = ("iteration", "distance", "rmse")


def export_trace_csv(trace, path):
    """One row per iteration: index, gradient distance, RMSE (9 significant digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for i, d, r in trace.records:
            writer.writerow([i, f"{d:.9g}", f"{r:.9g}"])


def read_trace_csv(path):
    """Returns ``(iterations, distances, rmses)`` as numpy arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TRACE_HEADER:
        raise FormatError(f"{path}: unexpected header {rows[0]}")
    body = np.array(rows[1:], dtype=np.float64).reshape(-1, 3)
    return body[:, 0].astype(np.int64), body[:, 1], body[:, 2]
