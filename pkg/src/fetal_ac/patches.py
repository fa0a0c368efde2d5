"""Anechoic pixel selection and multi-view patch extraction.

Coordinates: arrays are indexed ``[row, col]``; geometric points (probe
origin, directions) are ``(x, y)`` with ``x = col`` and ``y = row``, so the
y axis points down the image.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ParameterError, UndefinedDirectionError

log = logging.getLogger(__name__)

ANECHOIC_FRACTION = 0.1
NORMAL_VIEW = 128


class ClassLabel(enum.IntEnum):
    """Palette codes used in label maps and semantic maps (0 = unlabeled)."""

    SB = 1
    UV = 2
    AF = 3
    SA = 4

    @property
    def index(self) -> int:
        """Position of this class in the network's 4-way output."""
        return int(self) - 1


UNLABELED = 0
N_CLASSES = 4


@dataclass
class UltrasoundImage:
    pixels: np.ndarray
    pixel_spacing_mm: float = 1.0
    probe_origin: tuple[float, float] | None = None
    fan_degrees: tuple[float, float] | None = None
    image_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise InputError("ultrasound image must be a 2-D grid")
        if px.dtype != np.uint8:
            raise InputError("ultrasound pixels must be 8-bit")
        if min(px.shape) < 256:
            raise InputError(f"image must be at least 256x256, got {px.shape}")
        if not self.pixel_spacing_mm > 0:
            raise InputError("pixel_spacing_mm must be positive")
        self.pixels = px
        if self.probe_origin is None:
            self.probe_origin = default_probe_origin(px.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def default_probe_origin(shape: tuple[int, int]) -> tuple[float, float]:
    """Centre of the top edge, raised by 10% of the image height."""
    h, w = shape
    return ((w - 1) / 2.0, -0.1 * h)


def fan_range(shape: tuple[int, int], origin: tuple[float, float]) -> tuple[float, float]:
    """Angular span (degrees, measured from +x toward +y) covering every pixel."""
    h, w = shape
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], float)
    ang = np.degrees(np.arctan2(corners[:, 1] - origin[1], corners[:, 0] - origin[0]))
    return float(ang.min()), float(ang.max())


def anechoic_mask(image: UltrasoundImage | np.ndarray) -> np.ndarray:
    """Boolean mask of pixels with intensity <= 0.1 x the image maximum."""
    px = image.pixels if isinstance(image, UltrasoundImage) else np.asarray(image)
    if px.size == 0:
        raise InputError("empty image")
    return px.astype(np.float64) <= ANECHOIC_FRACTION * float(px.max())


def propagation_direction(pixel, probe_origin) -> tuple[float, float]:
    """Unit vector from the probe origin toward ``pixel``; both given as (x, y)."""
    dx = float(pixel[0]) - float(probe_origin[0])
    dy = float(pixel[1]) - float(probe_origin[1])
    r = math.hypot(dx, dy)
    if r == 0.0:
        raise UndefinedDirectionError("pixel coincides with the probe origin")
    return dx / r, dy / r


def propagation_directions(rows: np.ndarray, cols: np.ndarray, probe_origin) -> np.ndarray:
    dx = np.asarray(cols, np.float64) - float(probe_origin[0])
    dy = np.asarray(rows, np.float64) - float(probe_origin[1])
    r = np.hypot(dx, dy)
    if np.any(r == 0):
        raise UndefinedDirectionError("pixel coincides with the probe origin")
    return np.stack([dx / r, dy / r], axis=1)


class ViewExtractor:
    """Batch extraction of normal- and wide-view patches from one image.

    The normal view is the ``size x size`` window whose index ``size//2 - 1``
    falls on the centre pixel; the wide view is the ``2*size`` window placed the
    same way and reduced by 2x2 block means. Out-of-image pixels read as 0.
    """

    def __init__(self, pixels: np.ndarray, size: int = NORMAL_VIEW):
        if size < 2 or size % 2:
            raise ParameterError("view size must be an even integer >= 2")
        self.size = size
        self.shape = pixels.shape
        pad = 2 * size
        self.pad = pad
        img = np.zeros((pixels.shape[0] + 2 * pad, pixels.shape[1] + 2 * pad), np.float32)
        img[pad:-pad, pad:-pad] = pixels.astype(np.float32) / 255.0
        self._normal = sliding_window_view(img, (size, size))
        box = 0.25 * (img[:-1, :-1] + img[1:, :-1] + img[:-1, 1:] + img[1:, 1:])
        # block-mean grid split by parity of the window's top-left corner
        self._wide = [
            [sliding_window_view(box[py::2, px::2], (size, size)) for px in (0, 1)]
            for py in (0, 1)
        ]

    def normal(self, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        off = self.size // 2 - 1
        return self._normal[rows - off + self.pad, cols - off + self.pad]

    def wide(self, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        top = rows - (self.size - 1) + self.pad
        left = cols - (self.size - 1) + self.pad
        out = np.empty((rows.size, self.size, self.size), np.float32)
        for py in (0, 1):
            for px in (0, 1):
                sel = ((top % 2) == py) & ((left % 2) == px)
                if np.any(sel):
                    out[sel] = self._wide[py][px][top[sel] // 2, left[sel] // 2]
        return out


def extract_views(image: UltrasoundImage | np.ndarray, row: int, col: int, size: int = NORMAL_VIEW):
    """Return ``(normal_view, wide_view)`` for the pixel at ``(row, col)``."""
    px = image.pixels if isinstance(image, UltrasoundImage) else np.asarray(image)
    if not (0 <= row < px.shape[0] and 0 <= col < px.shape[1]):
        raise InputError(f"centre ({row}, {col}) outside image {px.shape}")
    ex = ViewExtractor(px, size)
    return ex.normal([row], [col])[0], ex.wide([row], [col])[0]


@dataclass
class PatchSample:
    normal_view: np.ndarray
    wide_view: np.ndarray
    direction: np.ndarray
    label: ClassLabel | None = None
    source: tuple[str, int, int] = ("", 0, 0)


@dataclass
class PatchSet:
    """Column-oriented collection of patch samples.

    ``labels`` holds class *indices* (0..3); ``sources`` holds
    ``(image index, row, col)``; ``is_train`` marks the training split.
    """

    normal: np.ndarray
    wide: np.ndarray
    direction: np.ndarray
    labels: np.ndarray
    sources: np.ndarray
    is_train: np.ndarray
    image_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "PatchSet":
        return PatchSet(
            self.normal[idx], self.wide[idx], self.direction[idx], self.labels[idx],
            self.sources[idx], self.is_train[idx], self.image_ids,
        )

    @property
    def train(self) -> "PatchSet":
        return self.subset(np.flatnonzero(self.is_train))

    @property
    def test(self) -> "PatchSet":
        return self.subset(np.flatnonzero(~self.is_train))

    def sample(self, i: int) -> PatchSample:
        img, r, c = (int(v) for v in self.sources[i])
        name = self.image_ids[img] if img < len(self.image_ids) else str(img)
        return PatchSample(
            self.normal[i], self.wide[i], self.direction[i],
            ClassLabel(int(self.labels[i]) + 1), (name, r, c),
        )

    @classmethod
    def concat(cls, parts: list["PatchSet"]) -> "PatchSet":
        """Stack patch sets; image indices in ``sources`` are offset to stay unique."""
        if not parts:
            return cls.empty()
        srcs, ids, off = [], [], 0
        for p in parts:
            s = p.sources.copy()
            s[:, 0] += off
            srcs.append(s)
            ids += p.image_ids
            off += max(len(p.image_ids), int(p.sources[:, 0].max()) + 1 if len(p) else 0)
        cols = [np.concatenate([getattr(p, f) for p in parts]) for f in ("normal", "wide", "direction", "labels")]
        return cls(*cols, np.concatenate(srcs), np.concatenate([p.is_train for p in parts]), ids)

    @classmethod
    def empty(cls, size: int = NORMAL_VIEW) -> "PatchSet":
        return cls(
            np.zeros((0, size, size), np.float32), np.zeros((0, size, size), np.float32),
            np.zeros((0, 2)), np.zeros((0,), np.int64), np.zeros((0, 3), np.int64),
            np.zeros((0,), bool),
        )


@dataclass(frozen=True)
class SamplingConfig:
    view_size: int = NORMAL_VIEW
    cap_per_class: int = 100
    train_fraction: float = 2.0 / 3.0
    seed: int = 0


def build_dataset(items, config: SamplingConfig = SamplingConfig()) -> PatchSet:
    """Sample labelled anechoic pixels from ``(image, label_map)`` pairs.

    At most ``cap_per_class`` pixels per class per image are drawn; the
    result is split train/test by ``train_fraction`` (2:1 by default).
    """
    rng = np.random.default_rng(config.seed)
    normals, wides, dirs, labels, sources, ids = [], [], [], [], [], []
    seen = np.zeros(N_CLASSES, bool)
    for k, (image, label_map) in enumerate(items):
        ids.append(image.image_id or str(k))
        label_map = np.asarray(label_map)
        if label_map.shape != image.shape:
            raise InputError(f"label map {label_map.shape} does not match image {image.shape}")
        mask = anechoic_mask(image)
        ex = ViewExtractor(image.pixels, config.view_size)
        for cls in ClassLabel:
            rr, cc = np.nonzero(mask & (label_map == int(cls)))
            if rr.size == 0:
                continue
            seen[cls.index] = True
            if rr.size > config.cap_per_class:
                pick = np.sort(rng.choice(rr.size, config.cap_per_class, replace=False))
                rr, cc = rr[pick], cc[pick]
            normals.append(ex.normal(rr, cc))
            wides.append(ex.wide(rr, cc))
            dirs.append(propagation_directions(rr, cc, image.probe_origin))
            labels.append(np.full(rr.size, cls.index, np.int64))
            sources.append(np.stack([np.full(rr.size, k), rr, cc], axis=1))
    if not labels:
        ps = PatchSet.empty(config.view_size)
        ps.image_ids = ids
        return ps
    for cls in ClassLabel:
        if not seen[cls.index]:
            log.warning("class %s absent from all images", cls.name)
    labels = np.concatenate(labels)
    n = labels.size
    n_train = int(round(n * config.train_fraction))
    is_train = np.zeros(n, bool)
    is_train[rng.permutation(n)[:n_train]] = True
    return PatchSet(
        np.concatenate(normals), np.concatenate(wides), np.concatenate(dirs),
        labels, np.concatenate(sources).astype(np.int64), is_train, ids,
    )
