"""Deterministic offline augmentation: displacement, center crop, and the
eight square symmetries, expanding every labeled slice 40-fold (5 shifts
x 8 symmetries).  Image and mask always receive the identical transform."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import InvalidArgument


@dataclass
class Sample:
    """One labeled slice: image in [0,1], per-pixel class mask, physical
    pixel spacing in millimetres, and an identifier."""

    image: np.ndarray
    mask: np.ndarray
    spacing: tuple[float, float]
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2:
            raise InvalidArgument(f"sample {self.id!r}: image must be 2-D, got {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise InvalidArgument(
                f"sample {self.id!r}: image {self.image.shape} and mask {self.mask.shape} differ"
            )
        if not np.issubdtype(self.mask.dtype, np.integer):
            raise InvalidArgument(f"sample {self.id!r}: mask must be integer-typed")
        if not (self.spacing[0] > 0 and self.spacing[1] > 0):
            raise InvalidArgument(f"sample {self.id!r}: spacing must be positive, got {self.spacing}")


class DihedralElement(Enum):
    """The eight symmetries of the square."""

    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"
    TRANSPOSE = "transpose"
    ANTI_TRANSPOSE = "anti_transpose"

    def apply(self, arr: np.ndarray) -> np.ndarray:
        if self is DihedralElement.IDENTITY:
            out = arr
        elif self is DihedralElement.ROT90:
            out = np.rot90(arr, 1)
        elif self is DihedralElement.ROT180:
            out = np.rot90(arr, 2)
        elif self is DihedralElement.ROT270:
            out = np.rot90(arr, 3)
        elif self is DihedralElement.FLIP_H:
            out = np.fliplr(arr)
        elif self is DihedralElement.FLIP_V:
            out = np.flipud(arr)
        elif self is DihedralElement.TRANSPOSE:
            out = arr.T
        else:  # ANTI_TRANSPOSE: transpose across the other diagonal
            out = np.rot90(arr.T, 2)
        return np.ascontiguousarray(out)

    @property
    def inverse(self) -> "DihedralElement":
        if self is DihedralElement.ROT90:
            return DihedralElement.ROT270
        if self is DihedralElement.ROT270:
            return DihedralElement.ROT90
        return self  # every other element is an involution


DIHEDRAL_ORDER: tuple[DihedralElement, ...] = tuple(DihedralElement)


def displace(sample: Sample, dx: int, dy: int) -> Sample:
    """Shift content by dx columns and dy rows: output (r, c) reads input
    (r - dy, c - dx).  Vacated pixels become image 0 / mask background."""
    h, w = sample.image.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise InvalidArgument(f"displacement ({dx},{dy}) exceeds image size {h}x{w}")
    image = np.zeros_like(sample.image)
    mask = np.zeros_like(sample.mask)
    src_r = slice(max(0, -dy), h - max(0, dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    image[dst_r, dst_c] = sample.image[src_r, src_c]
    mask[dst_r, dst_c] = sample.mask[src_r, src_c]
    if dx == 0 and dy == 0:
        return replace(sample, image=image, mask=mask)
    return replace(sample, image=image, mask=mask, id=f"{sample.id}__s{dx:+d}{dy:+d}")


def center_crop(sample: Sample, size: int = 108) -> Sample:
    """Crop a centered size-by-size window (offset floor((dim - size)/2))."""
    h, w = sample.image.shape
    if size > h or size > w:
        raise InvalidArgument(f"crop size {size} exceeds image size {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return replace(
        sample,
        image=sample.image[r0 : r0 + size, c0 : c0 + size].copy(),
        mask=sample.mask[r0 : r0 + size, c0 : c0 + size].copy(),
    )


def dihedral(sample: Sample, elem: DihedralElement) -> Sample:
    """Apply one square symmetry to image and mask; exact index permutation."""
    h, w = sample.image.shape
    if h != w:
        raise InvalidArgument(f"dihedral transforms need a square sample, got {h}x{w}")
    return replace(
        sample,
        image=elem.apply(sample.image),
        mask=elem.apply(sample.mask),
        id=f"{sample.id}__{elem.value}",
    )


def displacement_offsets(shift: int) -> tuple[tuple[int, int], ...]:
    """Identity plus the four diagonal shifts."""
    s = shift
    return ((0, 0), (s, s), (s, -s), (-s, s), (-s, -s))


def augment_dataset(
    samples: Sequence[Sample], crop_size: int = 108, shift: int = 5
) -> list[Sample]:
    """Expand each sample 40-fold: each of the 5 displacement variants is
    center-cropped and then run through all 8 square symmetries.  Output
    order is fixed by input order and the transform enumeration."""
    out: list[Sample] = []
    for sample in samples:
        try:
            for dx, dy in displacement_offsets(shift):
                moved = displace(sample, dx, dy)
                cropped = center_crop(moved, crop_size)
                for elem in DIHEDRAL_ORDER:
                    out.append(dihedral(cropped, elem))
        except InvalidArgument as exc:
            raise InvalidArgument(f"augmenting sample {sample.id!r}: {exc}") from exc
    return out
