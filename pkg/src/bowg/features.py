"""Frame features: keypoints, binary descriptors and the text features file."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

MAGIC = "BOWG-FEAT"
VERSION = "v1"


class FeatureFormatError(ValueError):
    """Raised for malformed or inconsistent features files."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    size: float
    angle: float | None = None
    octave: int = 0


@dataclass(eq=False)
class FrameFeatures:
    """All features of one image.

    Keypoint attributes are held column-wise; ``angle`` uses NaN for "unset".
    ``descriptors`` is an ``(n, n_bytes)`` uint8 array, one row per keypoint.
    """

    frame_id: int
    timestamp: float
    width: int
    height: int
    xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    angle: np.ndarray = field(default_factory=lambda: np.zeros(0))
    octave: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 32), dtype=np.uint8))

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        n = len(self.xy)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(n)
        self.angle = np.asarray(self.angle, dtype=np.float64).reshape(n)
        self.octave = np.asarray(self.octave, dtype=np.int32).reshape(n)
        d = np.asarray(self.descriptors, dtype=np.uint8)
        if d.ndim != 2 or len(d) != n:
            raise ValueError(f"expected {n} descriptor rows, got shape {d.shape}")
        self.descriptors = d

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def descriptor_bits(self) -> int:
        return self.descriptors.shape[1] * 8

    @property
    def keypoints(self) -> list[Keypoint]:
        return [
            Keypoint(float(x), float(y), float(s), None if math.isnan(a) else float(a), int(o))
            for (x, y), s, a, o in zip(self.xy, self.size, self.angle, self.octave)
        ]

    @classmethod
    def from_keypoints(cls, frame_id, timestamp, width, height, keypoints: Iterable[Keypoint], descriptors, n_bytes=32):
        kps = list(keypoints)
        desc = np.asarray(descriptors, dtype=np.uint8)
        if desc.size == 0:
            desc = np.zeros((0, n_bytes), dtype=np.uint8)
        return cls(
            frame_id=frame_id,
            timestamp=timestamp,
            width=width,
            height=height,
            xy=[(k.x, k.y) for k in kps] if kps else np.zeros((0, 2)),
            size=[k.size for k in kps],
            angle=[math.nan if k.angle is None else k.angle for k in kps],
            octave=[k.octave for k in kps],
            descriptors=desc,
        )

    def same_as(self, other: "FrameFeatures") -> bool:
        """Bit-level equality, NaN angles comparing equal."""
        return (
            self.frame_id == other.frame_id
            and self.timestamp == other.timestamp
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.size, other.size)
            and np.array_equal(self.angle, other.angle, equal_nan=True)
            and np.array_equal(self.octave, other.octave)
            and np.array_equal(self.descriptors, other.descriptors)
        )


# -- Hamming distance -------------------------------------------------------


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of two uint8 descriptor arrays."""
    a = np.ascontiguousarray(a, dtype=np.uint8)
    b = np.ascontiguousarray(b, dtype=np.uint8)
    if a.shape[1] % 8 == 0:
        a = a.view(np.uint64)
        b = b.view(np.uint64)
    x = a[:, None, :] ^ b[None, :, :]
    return np.bitwise_count(x).sum(axis=2, dtype=np.int32)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray | int:
    """Row-wise Hamming distance with broadcasting over leading axes."""
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))
    d = np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
    return int(d) if np.ndim(d) == 0 else d


# -- features file ----------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_frame(out: TextIO, frame: FrameFeatures) -> None:
    out.write(f"frame {frame.frame_id} {_fmt(frame.timestamp)} {frame.width} {frame.height} {len(frame)}\n")
    hexes = [row.tobytes().hex() for row in frame.descriptors]
    for (x, y), s, a, o, h in zip(frame.xy, frame.size, frame.angle, frame.octave, hexes):
        ang = "-" if math.isnan(a) else _fmt(a)
        out.write(f"{_fmt(x)} {_fmt(y)} {_fmt(s)} {ang} {int(o)} {h}\n")


def dumps_features(frames: Iterable[FrameFeatures], descriptor_bits: int = 256) -> str:
    import io

    buf = io.StringIO()
    _write_all(buf, frames, descriptor_bits)
    return buf.getvalue()


def _write_all(out: TextIO, frames: Iterable[FrameFeatures], descriptor_bits: int) -> None:
    out.write(f"{MAGIC} {VERSION} {descriptor_bits}\n")
    for f in frames:
        if len(f) and f.descriptor_bits != descriptor_bits:
            raise FeatureFormatError(
                f"frame {f.frame_id} has {f.descriptor_bits}-bit descriptors, file is {descriptor_bits}"
            )
        write_frame(out, f)


def save_features(path: str | Path, frames: Iterable[FrameFeatures], descriptor_bits: int | None = None) -> None:
    frames = list(frames)
    if descriptor_bits is None:
        descriptor_bits = next((f.descriptor_bits for f in frames if len(f)), 256)
    with open(path, "w", encoding="ascii", newline="\n") as out:
        _write_all(out, frames, descriptor_bits)


def iter_features(lines: Iterable[str]) -> Iterator[FrameFeatures]:
    """Parse a features stream lazily, frame by frame."""
    it = iter(enumerate(lines, start=1))
    try:
        lineno, header = next(it)
    except StopIteration:
        raise FeatureFormatError("empty file (missing header)", 1) from None
    parts = header.split()
    if len(parts) != 3 or parts[0] != MAGIC or parts[1] != VERSION:
        raise FeatureFormatError(f"bad header {header.strip()!r}", lineno)
    try:
        bits = int(parts[2])
    except ValueError:
        raise FeatureFormatError(f"bad descriptor width {parts[2]!r}", lineno) from None
    if bits <= 0 or bits % 8:
        raise FeatureFormatError(f"descriptor width must be a positive multiple of 8, got {bits}", lineno)
    n_bytes = bits // 8
    last_id = -1

    for lineno, line in it:
        if not line.strip():
            continue
        p = line.split()
        if p[0] != "frame" or len(p) != 6:
            raise FeatureFormatError(f"expected frame record, got {line.strip()!r}", lineno)
        try:
            fid, ts, w, h, n = int(p[1]), float(p[2]), int(p[3]), int(p[4]), int(p[5])
        except ValueError as e:
            raise FeatureFormatError(f"bad frame record: {e}", lineno) from None
        if fid <= last_id:
            raise FeatureFormatError(f"frame ids must be strictly increasing ({fid} after {last_id})", lineno)
        if n < 0:
            raise FeatureFormatError("negative feature count", lineno)
        last_id = fid
        xy = np.empty((n, 2))
        size = np.empty(n)
        angle = np.empty(n)
        octave = np.empty(n, dtype=np.int32)
        desc = np.empty((n, n_bytes), dtype=np.uint8)
        for k in range(n):
            try:
                lineno, line = next(it)
            except StopIteration:
                raise FeatureFormatError(f"frame {fid}: expected {n} features, file ended after {k}", lineno) from None
            q = line.split()
            if len(q) != 6:
                raise FeatureFormatError(f"expected 6 fields, got {len(q)}", lineno)
            try:
                xy[k] = float(q[0]), float(q[1])
                size[k] = float(q[2])
                angle[k] = math.nan if q[3] == "-" else float(q[3])
                octave[k] = int(q[4])
                raw = bytes.fromhex(q[5])
            except ValueError as e:
                raise FeatureFormatError(f"bad feature record: {e}", lineno) from None
            if len(raw) != n_bytes:
                raise FeatureFormatError(
                    f"descriptor has {len(raw) * 8} bits, header declares {bits}", lineno
                )
            desc[k] = np.frombuffer(raw, dtype=np.uint8)
        yield FrameFeatures(fid, ts, w, h, xy, size, angle, octave, desc)


def loads_features(text: str) -> list[FrameFeatures]:
    return list(iter_features(text.splitlines()))


def load_features(path: str | Path) -> list[FrameFeatures]:
    with open(path, encoding="ascii") as f:
        return list(iter_features(f))
