"""Dataset ingestion: PGM images, text contours, polygon rasterization,
synthetic annulus phantoms, and the JSON manifest format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import Sample
from .errors import ConfigError, InvalidArgument, ParseError

# Class encoding shared by masks, rasterization and metrics.
CLASS_BACKGROUND = 0
CLASS_MYOCARDIUM = 1
CLASS_CAVITY = 2

DEFAULT_SPACING = (1.25, 1.25)  # mm per pixel, typical short-axis cine MRI


# ---------------------------------------------------------------------------
# PGM (P5) images
# ---------------------------------------------------------------------------


def _parse_pgm_header(raw: bytes, path) -> tuple[int, int, int, int]:
    """Returns (width, height, maxval, payload offset)."""
    if raw[:2] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (P5), starts with {raw[:2]!r} at byte 0")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ParseError(f"{path}: header ended prematurely at byte {pos}")
        ch = raw[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise ParseError(f"{path}: unexpected byte {ch!r} in header at byte {pos}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ParseError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1  # exactly one whitespace separates header from payload
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}: maxval {maxval} out of range [1, 65535]")
    return width, height, maxval, pos


def load_image_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float array scaled to [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    width, height, maxval, pos = _parse_pgm_header(raw, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise ParseError(
            f"{path}: payload truncated at byte {pos + len(payload)}, "
            f"expected {expected} bytes"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return values.astype(np.float32) / maxval


def save_image_pgm(image: np.ndarray, path, maxval: int = 255) -> None:
    """Write an intensity image in [0, 1] as an 8- or 16-bit binary PGM."""
    if image.ndim != 2:
        raise InvalidArgument(f"image must be 2-D, got shape {image.shape}")
    if not 0 < maxval < 65536:
        raise InvalidArgument(f"maxval {maxval} out of range [1, 65535]")
    arr = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def _mask_gray_step(classes: int) -> int:
    return 255 // classes


def save_mask_pgm(mask: np.ndarray, path, classes: int = 3) -> None:
    """Write class indices as spaced gray levels (0, 85, 170 for 3 classes)."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= classes:
        raise InvalidArgument(f"mask values outside [0, {classes})")
    step = _mask_gray_step(classes)
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + (mask * step).astype("u1").tobytes())


def load_mask_pgm(path, classes: int = 3) -> np.ndarray:
    """Read a mask PGM back to class indices (inverse of save_mask_pgm)."""
    path = Path(path)
    raw = path.read_bytes()
    width, height, maxval, pos = _parse_pgm_header(raw, path)
    if maxval != 255:
        raise ParseError(f"{path}: mask PGM must be 8-bit, got maxval {maxval}")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise ParseError(f"{path}: payload truncated at byte {pos + len(payload)}")
    gray = np.frombuffer(payload, dtype="u1").reshape(height, width)
    step = _mask_gray_step(classes)
    idx = np.rint(gray.astype(np.float64) / step).astype(np.int64)
    if (np.abs(gray - idx * step) > step // 3).any() or idx.max() >= classes:
        raise ParseError(f"{path}: gray levels are not multiples of {step} for {classes} classes")
    return idx


# ---------------------------------------------------------------------------
# text contours and rasterization
# ---------------------------------------------------------------------------


def load_contour_text(path) -> np.ndarray:
    """Read an 'x y' per line polygon; returns an (n, 2) float64 array."""
    path = Path(path)
    points = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected 'x y', got {stripped!r}")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric coordinate in {stripped!r}") from None
    if len(points) < 3:
        raise ParseError(f"{path}: a contour needs at least 3 points, got {len(points)}")
    return np.asarray(points, dtype=np.float64)


def save_contour_text(polygon: np.ndarray, path) -> None:
    lines = [f"{x:.17g} {y:.17g}" for x, y in np.asarray(polygon)]
    Path(path).write_text("\n".join(lines) + "\n")


def points_in_polygon(polygon: np.ndarray, size: int) -> np.ndarray:
    """Even-odd containment of every pixel center (x=col, y=row) in a
    size-by-size grid.  Half-open crossing rule keeps boundaries consistent."""
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise InvalidArgument(f"polygon must be (n>=3, 2), got {poly.shape}")
    xs = np.arange(size, dtype=np.float64)[None, :]
    ys = np.arange(size, dtype=np.float64)[:, None]
    inside = np.zeros((size, size), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for i in range(len(poly)):
        if y0[i] == y1[i]:
            continue  # horizontal edges never cross the scan rule
        crosses = (y0[i] <= ys) != (y1[i] <= ys)
        t = (ys - y0[i]) / (y1[i] - y0[i])
        inside ^= crosses & (xs < x0[i] + t * (x1[i] - x0[i]))
    return inside


def contour_to_mask(
    endo: Optional[np.ndarray], epi: Optional[np.ndarray], size: int
) -> np.ndarray:
    """Rasterize boundary polygons to the 3-class mask: cavity inside the
    inner contour, myocardium between the contours, background elsewhere."""
    mask = np.full((size, size), CLASS_BACKGROUND, dtype=np.int64)
    if epi is not None:
        mask[points_in_polygon(epi, size)] = CLASS_MYOCARDIUM
    if endo is not None:
        mask[points_in_polygon(endo, size)] = CLASS_CAVITY
    return mask


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Annulus phantom generator settings: a bright myocardium ring around a
    mid-gray cavity on a dark background, with exact masks."""

    image_size: int = 108
    cavity_radius: tuple[float, float] = (9.0, 16.0)
    myo_thickness: tuple[float, float] = (6.0, 11.0)
    center_jitter: float = 6.0
    background_intensity: float = 0.15
    cavity_intensity: float = 0.55
    myo_intensity: float = 0.9
    noise_sigma: float = 0.03
    spacing: tuple[float, float] = DEFAULT_SPACING
    seed: int = 0

    @classmethod
    def for_size(cls, image_size: int, seed: int = 0) -> "PhantomSpec":
        """Defaults with the annulus geometry scaled to the image size."""
        s = image_size / 108.0
        return cls(
            image_size=image_size,
            cavity_radius=(9.0 * s, 16.0 * s),
            myo_thickness=(6.0 * s, 11.0 * s),
            center_jitter=6.0 * s,
            seed=seed,
        )

    def validate(self) -> None:
        if self.cavity_radius[0] <= 0 or self.cavity_radius[1] < self.cavity_radius[0]:
            raise ConfigError(f"bad cavity radius range {self.cavity_radius}")
        if self.myo_thickness[0] <= 0 or self.myo_thickness[1] < self.myo_thickness[0]:
            raise ConfigError(f"bad myocardium thickness range {self.myo_thickness}")
        if self.center_jitter < 0 or self.noise_sigma < 0:
            raise ConfigError("center_jitter and noise_sigma must be non-negative")
        reach = self.cavity_radius[1] + self.myo_thickness[1] + self.center_jitter
        if reach >= self.image_size / 2:
            raise ConfigError(
                f"phantom geometry (radius+thickness+jitter = {reach}) does not fit "
                f"inside a {self.image_size} px image"
            )


def synth_phantoms(spec: PhantomSpec, n: int) -> list[Sample]:
    """Generate n phantoms, deterministic in spec.seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    out = []
    for i in range(n):
        cx = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
        cy = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
        r_cav = rng.uniform(*spec.cavity_radius)
        thick = rng.uniform(*spec.myo_thickness)
        dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        mask = np.full((size, size), CLASS_BACKGROUND, dtype=np.int64)
        mask[dist <= r_cav + thick] = CLASS_MYOCARDIUM
        mask[dist <= r_cav] = CLASS_CAVITY
        levels = np.array(
            [spec.background_intensity, spec.myo_intensity, spec.cavity_intensity]
        )
        image = levels[mask]
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        out.append(Sample(image=image, mask=mask, spacing=spec.spacing, id=f"phantom{i:03d}"))
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: Optional[str] = None
    contour_endo_path: Optional[str] = None
    contour_epi_path: Optional[str] = None
    spacing: tuple[float, float] = DEFAULT_SPACING
    split: str = "train"
    case: Optional[str] = None

    @property
    def case_id(self) -> str:
        return self.case if self.case is not None else self.id


_PATH_FIELDS = ("image_path", "mask_path", "contour_endo_path", "contour_epi_path")


def read_manifest(path) -> list[ManifestEntry]:
    """Load a manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ParseError(f"{path}: manifest must be an object with an 'entries' list")
    default_spacing = tuple(doc.get("spacing", DEFAULT_SPACING))
    base = path.parent
    entries: list[ManifestEntry] = []
    seen = set()
    for i, item in enumerate(doc["entries"]):
        if "id" not in item or "image" not in item:
            raise ParseError(f"{path}: entry {i} needs 'id' and 'image' fields")
        eid = item["id"]
        if eid in seen:
            raise ParseError(f"{path}: duplicate entry id {eid!r}")
        seen.add(eid)
        entry = ManifestEntry(
            id=eid,
            image_path=str(base / item["image"]),
            mask_path=str(base / item["mask"]) if item.get("mask") else None,
            contour_endo_path=str(base / item["contour_endo"]) if item.get("contour_endo") else None,
            contour_epi_path=str(base / item["contour_epi"]) if item.get("contour_epi") else None,
            spacing=tuple(item.get("spacing", default_spacing)),
            split=item.get("split", "train"),
            case=item.get("case"),
        )
        if entry.split not in ("train", "test"):
            raise ParseError(f"{path}: entry {eid!r} has unknown split {entry.split!r}")
        if entry.mask_path is None and entry.contour_endo_path is None and entry.contour_epi_path is None:
            raise ParseError(f"{path}: entry {eid!r} needs a mask or at least one contour")
        for f in _PATH_FIELDS:
            p = getattr(entry, f)
            if p is not None and not os.path.exists(p):
                raise ParseError(f"{path}: entry {eid!r} references missing file {p}")
        entries.append(entry)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    """Write entries as JSON with paths relative to the manifest folder."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Optional[str]) -> Optional[str]:
        if p is None:
            return None
        return os.path.relpath(Path(p).resolve(), base)

    items = []
    for e in entries:
        item = {"id": e.id, "image": rel(e.image_path), "spacing": list(e.spacing), "split": e.split}
        if e.mask_path:
            item["mask"] = rel(e.mask_path)
        if e.contour_endo_path:
            item["contour_endo"] = rel(e.contour_endo_path)
        if e.contour_epi_path:
            item["contour_epi"] = rel(e.contour_epi_path)
        if e.case is not None:
            item["case"] = e.case
        items.append(item)
    path.write_text(json.dumps({"entries": items}, indent=2) + "\n")


def split_entries(entries: Sequence[ManifestEntry], split: str) -> list[ManifestEntry]:
    return [e for e in entries if e.split == split]


def load_sample(entry: ManifestEntry, classes: int = 3) -> Sample:
    """Materialize one manifest entry: image plus mask (stored or rasterized)."""
    image = load_image_pgm(entry.image_path)
    if entry.mask_path is not None:
        mask = load_mask_pgm(entry.mask_path, classes=classes)
        if mask.shape != image.shape:
            raise InvalidArgument(
                f"entry {entry.id!r}: mask {mask.shape} does not match image {image.shape}"
            )
    else:
        endo = load_contour_text(entry.contour_endo_path) if entry.contour_endo_path else None
        epi = load_contour_text(entry.contour_epi_path) if entry.contour_epi_path else None
        if image.shape[0] != image.shape[1]:
            raise InvalidArgument(f"entry {entry.id!r}: contour rasterization needs square images")
        mask = contour_to_mask(endo, epi, image.shape[0])
    return Sample(image=image, mask=mask, spacing=entry.spacing, id=entry.id)


def save_sample(sample: Sample, directory, classes: int = 3, split: str = "train",
                case: Optional[str] = None) -> ManifestEntry:
    """Write one sample as a PGM image/mask pair and describe it as an entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_path = directory / f"{sample.id}.pgm"
    mask_path = directory / f"{sample.id}_mask.pgm"
    save_image_pgm(sample.image, image_path)
    save_mask_pgm(sample.mask, mask_path, classes=classes)
    return ManifestEntry(
        id=sample.id,
        image_path=str(image_path),
        mask_path=str(mask_path),
        spacing=sample.spacing,
        split=split,
        case=case,
    )
