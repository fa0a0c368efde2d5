"""Glue between stored datasets and the processing stages."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ClassifierNet, SemanticMap, semantic_map
from .ellipse import ACMeasurement, MeasureConfig, measure_ac
from .errors import FetalACError
from .imageio import ManifestEntry, read_manifest, read_pgm, read_sidecar
from .patches import PatchSet, SamplingConfig, UltrasoundImage, build_dataset
from .phantom import DatasetItem, truth_ellipse

log = logging.getLogger(__name__)


def load_image(path, sidecar=None, image_id: str = "") -> UltrasoundImage:
    """Read a PGM plus its optional ``key=value`` sidecar (probe origin, spacing)."""
    pixels = read_pgm(path)
    origin, spacing = None, 1.0
    if sidecar is not None and Path(sidecar).exists():
        sc = read_sidecar(sidecar)
        origin, spacing = sc.probe_origin, sc.pixel_spacing_mm
    return UltrasoundImage(pixels, spacing, origin, image_id=image_id or Path(path).stem)


@dataclass
class Sample:
    """An image with its label map and manifest record."""

    id: str
    image: UltrasoundImage
    labels: np.ndarray | None
    split: str | None
    entry: ManifestEntry | None = None

    @property
    def is_true_plane(self) -> bool:
        return str(self.entry.fields.get("true_plane", "1")) == "1" if self.entry else True

    def truth(self):
        return truth_ellipse(self.entry)


def load_manifest(path) -> list[Sample]:
    root = Path(path).parent
    entries, _ = read_manifest(path)
    out = []
    for e in entries:
        img = load_image(e.path("image", root), e.path("sidecar", root), e.id)
        lab = read_pgm(e.path("label", root)) if e.label else None
        out.append(Sample(e.id, img, lab, e.split, e))
    return out


def from_items(items: list[DatasetItem]) -> list[Sample]:
    """In-memory equivalent of writing a dataset and reading it back."""
    out = []
    for it in items:
        e = it.phantom.scene.abdomen
        fields = {"split": it.split, "true_plane": "1" if it.phantom.scene.is_true_plane else "0",
                  "cx": e.cx, "cy": e.cy, "a": e.a, "b": e.b, "theta": e.theta}
        entry = ManifestEntry(it.id, "", fields={k: str(v) for k, v in fields.items()})
        out.append(Sample(it.id, it.phantom.image, it.phantom.labels, it.split, entry))
    return out


def patch_dataset(samples: list[Sample], sampling: SamplingConfig) -> PatchSet:
    """Patches from train-split images form the training set; test-split images the held-out set."""
    parts = []
    for k, split in enumerate(("train", "test")):
        chosen = [(s.image, s.labels) for s in samples if s.split == split and s.labels is not None]
        if not chosen:
            continue
        frac = 1.0 if split == "train" else 0.0
        cfg = SamplingConfig(sampling.view_size, sampling.cap_per_class, frac, sampling.seed + k)
        parts.append(build_dataset(chosen, cfg))
    return PatchSet.concat(parts)


def segment_and_measure(image: UltrasoundImage, net: ClassifierNet, measure: MeasureConfig = MeasureConfig(),
                        batch: int = 1024) -> tuple[SemanticMap, ACMeasurement | None, str]:
    """Semantic map plus AC measurement; the last item is an error code ("" on success)."""
    smap = semantic_map(image, net, batch)
    try:
        return smap, measure_ac(smap.labels, image.pixel_spacing_mm, config=measure), ""
    except FetalACError as exc:
        code = getattr(exc, "code", type(exc).__name__)
        log.info("%s: measurement failed (%s)", image.image_id, code)
        return smap, None, code
