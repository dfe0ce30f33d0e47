"""Image, manifest and feature-map I/O plus ROI preparation."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cnnforge.errors import ContractError, InputError

BODY_SITES = ("bladder", "lymph_node", "visceral", "other")
LABELS = ("class1", "class2")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("patient_id", "lesion_id", "image_path", "body_site", "ld_mm", "label", "split")

FEATURE_MAGIC = b"CNNF"
FEATURE_VERSION = 1


@dataclass(eq=False)
class GrayImage:
    """8-bit gray raster; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ContractError(f"image must be a nonempty 2D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ContractError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class LesionRecord:
    patient_id: str
    lesion_id: str
    image_path: str
    body_site: str
    ld_mm: float
    label: str
    split: str

    def __post_init__(self):
        if not self.patient_id or not self.lesion_id:
            raise InputError("patient_id and lesion_id must be nonempty")
        if self.body_site not in BODY_SITES:
            raise InputError(f"unknown body_site {self.body_site!r}")
        if self.label not in LABELS:
            raise InputError(f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if not (math.isfinite(self.ld_mm) and self.ld_mm > 0):
            raise InputError(f"ld_mm must be positive, got {self.ld_mm}")


@dataclass(eq=False)
class FeatureMap:
    """One generated feature: float32 values in [-1, 1], shape (height, width)."""

    values: np.ndarray
    lesion_id: str
    template_name: str
    checkpoint_time: float
    divergent: bool = False  # not serialized

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ContractError(f"feature map must be 2D, got shape {v.shape}")
        if not (np.all(np.isfinite(v)) and np.all(np.abs(v) <= 1.0)):
            raise ContractError("feature values must lie in [-1, 1]")
        self.values = v

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.lesion_id == other.lesion_id
            and self.template_name == other.template_name
            and np.float32(self.checkpoint_time) == np.float32(other.checkpoint_time)
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise InputError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc.strerror}") from exc
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise InputError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise InputError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise InputError(f"{path}: maxval must be 255, got {maxval}")
    raster = data[offset:offset + w * h]
    if len(raster) != w * h:
        raise InputError(f"{path}: truncated PGM raster")
    return GrayImage(np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy())


def write_pgm(img, path):
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())


# -- ROI preparation ---------------------------------------------------------

def crop_roi(img, center, size):
    """Window of ``size=(w, h)`` centered at ``center=(x, y)``, shifted inward at borders."""
    cx, cy = center
    w, h = size
    if w < 1 or h < 1:
        raise ContractError("ROI size must be positive")
    if w > img.width or h > img.height:
        raise ContractError(f"ROI exceeds image: {w}x{h} in {img.width}x{img.height}")
    if not (0 <= cx < img.width and 0 <= cy < img.height):
        raise ContractError(f"ROI center {center} outside image")
    x0 = min(max(cx - w // 2, 0), img.width - w)
    y0 = min(max(cy - h // 2, 0), img.height - h)
    return GrayImage(img.pixels[y0:y0 + h, x0:x0 + w].copy())


def catmull_rom(t):
    """Cubic convolution kernel with a = -0.5."""
    a = -0.5
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _resample_matrix(n_in, n_out):
    """(n_out, n_in) weights: half-pixel centers, taps clamped to the edge."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(mat, (rows, idx), catmull_rom(frac - tap))
    return mat


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def bicubic_resize(img, out_w, out_h):
    if out_w < 1 or out_h < 1:
        raise ContractError("target dimensions must be positive")
    src = img.pixels.astype(np.float64)
    out = _resample_matrix(img.height, out_h) @ src @ _resample_matrix(img.width, out_w).T
    return GrayImage(np.clip(round_half_away(out), 0, 255).astype(np.uint8))


def normalize_to_cells(img):
    """Map intensities linearly onto [-1, 1]."""
    return img.pixels.astype(np.float64) / 127.5 - 1.0


def cells_to_gray(values):
    """Render a [-1, 1] field as 8-bit intensities, v -> round((v + 1) * 127.5)."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return GrayImage(round_half_away((v + 1.0) * 127.5).astype(np.uint8))


# -- manifest ----------------------------------------------------------------

def read_manifest(path):
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty manifest (missing header)")
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in MANIFEST_COLUMNS}
        records, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            f = {name: row[i].strip() for name, i in col.items()}
            try:
                ld = float(f["ld_mm"])
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad ld_mm {f['ld_mm']!r}") from None
            try:
                rec = LesionRecord(f["patient_id"], f["lesion_id"], f["image_path"],
                                   f["body_site"], ld, f["label"], f["split"])
            except InputError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if rec.lesion_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate lesion_id {rec.lesion_id!r}")
            seen.add(rec.lesion_id)
            records.append(rec)
    return records


def write_manifest(records, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.patient_id, r.lesion_id, r.image_path, r.body_site,
                             repr(float(r.ld_mm)), r.label, r.split])


def resolve_image(record, manifest_path):
    """Image paths in a manifest are relative to the manifest's directory."""
    p = Path(record.image_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def split_counts(records):
    counts = {s: 0 for s in SPLITS}
    for r in records:
        counts[r.split] += 1
    return counts


# -- feature files -----------------------------------------------------------

_HEADER = struct.Struct("<4sHIIf")


def encode_feature(fmap):
    lesion = fmap.lesion_id.encode("utf-8")
    name = fmap.template_name.encode("utf-8")
    if len(lesion) > 0xFFFF or len(name) > 0xFFFF:
        raise ContractError("identifier too long for feature header")
    return b"".join([
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fmap.width, fmap.height, fmap.checkpoint_time),
        struct.pack("<H", len(lesion)), lesion,
        struct.pack("<H", len(name)), name,
        fmap.values.astype("<f4").tobytes(),
    ])


def decode_feature(data, origin="<bytes>"):
    if len(data) < _HEADER.size:
        raise InputError(f"{origin}: truncated header")
    magic, version, w, h, t = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise InputError(f"{origin}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise InputError(f"{origin}: unsupported version {version}")
    pos = _HEADER.size
    names = []
    for _ in range(2):
        if pos + 2 > len(data):
            raise InputError(f"{origin}: truncated header")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise InputError(f"{origin}: truncated header")
        try:
            names.append(data[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise InputError(f"{origin}: identifier is not UTF-8") from None
        pos += n
    payload = data[pos:]
    if len(payload) != 4 * w * h:
        raise InputError(f"{origin}: truncated payload ({len(payload)} of {4 * w * h} bytes)")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)
    return FeatureMap(values, names[0], names[1], float(t))


def write_feature(fmap, path):
    Path(path).write_bytes(encode_feature(fmap))


def read_feature(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read feature file {path}: {exc.strerror}") from exc
    return decode_feature(data, str(path))
