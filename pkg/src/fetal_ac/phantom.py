"""Synthetic B-mode phantoms of an axial fetal abdomen.

The scene is drawn in the abdomen's own frame (unit circle scaled to the
ellipse axes, then rotated). Anechoic structures are the stomach bubble, the
umbilical vein "hockey stick", a partial ring of amniotic fluid outside the
abdominal wall, and acoustic shadows cast along probe rays behind bright
reflectors (spine, ribs). Everything else is speckled tissue kept safely
above the anechoic threshold, so the label map is exactly the anechoic set.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ellipse import Ellipse, ellipse_level
from .errors import ConfigError
from .imageio import ManifestEntry, Sidecar, relpath, write_manifest, write_pgm, write_sidecar
from .patches import ClassLabel, UltrasoundImage, default_probe_origin, fan_range

FALSE_MODES = ("no-SB", "uv-wrong", "distorted")


@dataclass(frozen=True)
class SpeckleConfig:
    tissue: float = 0.45
    abdomen: float = 0.55
    wall: float = 0.85
    reflector: float = 1.0
    speckle_shape: float = 4.0
    speckle_blur: float = 0.8
    shadow_attenuation: float = 0.08
    dark_level: float = 0.06
    tissue_floor: float = 0.16

    def __post_init__(self):
        if not 0 < self.shadow_attenuation <= 1:
            raise ConfigError("shadow_attenuation must lie in (0, 1]")
        for name in ("tissue", "abdomen", "wall", "reflector", "dark_level", "tissue_floor"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"echogenicity {name} must lie in [0, 1]")
        if self.dark_level >= 0.1 or self.tissue_floor <= 0.1:
            raise ConfigError("dark_level must be below and tissue_floor above the anechoic threshold")


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 256
    width: int = 256
    pixel_spacing_mm: float = 0.7
    a_range: tuple[float, float] = (52.0, 68.0)
    ratio_range: tuple[float, float] = (0.72, 0.95)
    distorted_ratio_range: tuple[float, float] = (0.42, 0.55)
    centre_jitter: float = 10.0
    centre_y_frac: float = 0.53
    wall_scale: float = 1.0 / 0.9
    af_outer_range: tuple[float, float] = (1.28, 1.42)
    af_coverage_range: tuple[float, float] = (0.6, 0.85)
    af_wobble: float = 0.05
    shadow_length_range: tuple[float, float] = (35.0, 65.0)
    n_ribs_range: tuple[int, int] = (1, 2)
    uv_width: float = 4.5
    speckle: SpeckleConfig = SpeckleConfig()

    def __post_init__(self):
        if min(self.height, self.width) < 256:
            raise ConfigError("phantom images must be at least 256x256")
        if self.wall_scale < 1:
            raise ConfigError("wall_scale must be >= 1 (AF lies outside the abdomen)")
        if self.af_outer_range[0] <= self.wall_scale:
            raise ConfigError("AF outer boundary must lie beyond the abdominal wall")


@dataclass
class Reflector:
    """Bright arc at constant range from the probe, with its shadow behind."""

    kind: str
    radius: float
    phi0: float
    phi1: float
    thickness: float
    shadow_length: float


@dataclass
class PhantomScene:
    abdomen: Ellipse
    sb: tuple[float, float, float, float, float] | None  # cx, cy, rx, ry, angle
    uv: list[tuple[float, float]]  # polyline vertices (x, y)
    uv_width: float
    af_inner_scale: float
    af_outer_scale: float
    af_gap: tuple[float, float]  # angular gap (start, length) in ellipse parameter
    af_wobble: tuple[float, ...]
    reflectors: list[Reflector]
    probe_origin: tuple[float, float]
    fan_degrees: tuple[float, float]
    is_true_plane: bool = True
    false_mode: str | None = None
    seed: int = 0

    @property
    def ac_pixels(self) -> float:
        return self.abdomen.perimeter()

    def to_record(self) -> dict:
        d = {
            "abdomen": self.abdomen.to_dict(),
            "sb": list(self.sb) if self.sb else None,
            "uv": [list(p) for p in self.uv],
            "uv_width": self.uv_width,
            "af_inner_scale": self.af_inner_scale,
            "af_outer_scale": self.af_outer_scale,
            "af_gap": list(self.af_gap),
            "af_wobble": list(self.af_wobble),
            "reflectors": [asdict(r) for r in self.reflectors],
            "probe_origin": list(self.probe_origin),
            "fan_degrees": list(self.fan_degrees),
            "is_true_plane": self.is_true_plane,
            "false_mode": self.false_mode,
        }
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_record(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()


def _local_to_image(e: Ellipse, u, v):
    """Map abdomen-frame coordinates (units of a and b) to image (x, y)."""
    c, s = math.cos(e.theta), math.sin(e.theta)
    x, y = np.asarray(u) * e.a, np.asarray(v) * e.b
    return e.cx + c * x - s * y, e.cy + s * x + c * y


def _ellipse_param(e: Ellipse, xs, ys):
    """Eccentric-anomaly angle of each point in the abdomen frame, in [0, 2pi)."""
    c, s = math.cos(e.theta), math.sin(e.theta)
    dx, dy = xs - e.cx, ys - e.cy
    u = (c * dx + s * dy) / e.a
    v = (-s * dx + c * dy) / e.b
    return np.arctan2(v, u) % (2 * np.pi)


def _segment_distance(xs, ys, p, q):
    px, py = p
    qx, qy = q
    vx, vy = qx - px, qy - py
    L2 = vx * vx + vy * vy
    t = np.clip(((xs - px) * vx + (ys - py) * vy) / max(L2, 1e-12), 0, 1)
    return np.hypot(xs - (px + t * vx), ys - (py + t * vy))


def _polyline_mask(xs, ys, pts, width):
    d = np.full(xs.shape, np.inf)
    for p, q in zip(pts[:-1], pts[1:]):
        d = np.minimum(d, _segment_distance(xs, ys, p, q))
    return d <= width / 2


def _make_scene(rng: np.random.Generator, cfg: PhantomConfig, false_mode: str | None, seed: int) -> PhantomScene:
    h, w = cfg.height, cfg.width
    origin = default_probe_origin((h, w))
    fan = fan_range((h, w), origin)

    a = rng.uniform(*cfg.a_range)
    ratio_rng = cfg.distorted_ratio_range if false_mode == "distorted" else cfg.ratio_range
    b = a * rng.uniform(*ratio_rng)
    theta = rng.uniform(0, math.pi)
    cx = (w - 1) / 2 + rng.uniform(-1, 1) * cfg.centre_jitter
    cy = cfg.centre_y_frac * h + rng.uniform(-1, 1) * cfg.centre_jitter
    abdomen = Ellipse(cx, cy, a, b, theta)
    mirror = 1.0 if rng.random() < 0.5 else -1.0

    # stomach bubble on one side of the abdomen
    sb = None
    su, sv = 0.42 * mirror, rng.uniform(-0.05, 0.2)
    sbx, sby = _local_to_image(abdomen, su, sv)
    sb_r = (rng.uniform(0.17, 0.23) * b, rng.uniform(0.11, 0.15) * b)
    sb_ang = theta + rng.uniform(-0.5, 0.5)
    if false_mode != "no-SB":
        sb = (float(sbx), float(sby), float(sb_r[0]), float(sb_r[1]), float(sb_ang))

    # umbilical vein: enters from the anterior wall, bends toward the stomach
    if false_mode == "uv-wrong":
        # straight run on the opposite side, no bend
        pts_local = [(-0.55 * mirror, 0.6), (-0.55 * mirror, -0.45)]
    else:
        bend = rng.uniform(0.05, 0.15)
        pts_local = [
            (-0.12 * mirror, 0.66),
            (-0.1 * mirror, bend + 0.12),
            (0.0 * mirror, bend),
            (0.18 * mirror, bend - 0.03),
        ]
    uv = [tuple(float(c) for c in _local_to_image(abdomen, u, v)) for u, v in pts_local]

    # AF ring with a gap; the wobble perturbs only the outer boundary
    coverage = rng.uniform(*cfg.af_coverage_range)
    gap_len = (1 - coverage) * 2 * math.pi
    gap_start = rng.uniform(0, 2 * math.pi)
    af_outer = rng.uniform(*cfg.af_outer_range)
    wobble = tuple(float(x) for x in rng.uniform(-1, 1, size=6) * cfg.af_wobble)

    # reflectors: spine posterior, ribs lateral
    reflectors = []
    spots = [("spine", 0.0, -0.72, 14.0, 6.0)]
    n_ribs = int(rng.integers(cfg.n_ribs_range[0], cfg.n_ribs_range[1] + 1))
    rib_sides = rng.permutation([(0.86, 0.25), (-0.86, 0.3), (0.8, -0.4), (-0.8, -0.35)])[:n_ribs]
    for ru, rv in rib_sides:
        spots.append(("rib", float(ru), float(rv), 8.0, 3.0))
    for kind, u, v, width, thick in spots:
        px, py = _local_to_image(abdomen, u, v)
        r0 = math.hypot(px - origin[0], py - origin[1])
        phi = math.atan2(py - origin[1], px - origin[0])
        half = (width / 2) / r0
        reflectors.append(
            Reflector(kind, r0, phi - half, phi + half, thick, float(rng.uniform(*cfg.shadow_length_range)))
        )

    scene = PhantomScene(
        abdomen=abdomen, sb=sb, uv=uv, uv_width=cfg.uv_width,
        af_inner_scale=cfg.wall_scale, af_outer_scale=af_outer,
        af_gap=(gap_start, gap_len), af_wobble=wobble, reflectors=reflectors,
        probe_origin=origin, fan_degrees=fan,
        is_true_plane=false_mode is None, false_mode=false_mode, seed=seed,
    )
    _check_scene(scene)
    return scene


def _check_scene(scene: PhantomScene) -> None:
    e = scene.abdomen
    if scene.sb is not None:
        if ellipse_level(e, np.array(scene.sb[0]), np.array(scene.sb[1])) > 1:
            raise ConfigError("stomach bubble centre lies outside the abdomen")
    for x, y in scene.uv:
        if ellipse_level(e, np.array(x), np.array(y)) > 1:
            raise ConfigError("umbilical vein leaves the abdomen")


def shadow_mask(scene: PhantomScene, shape) -> tuple[np.ndarray, np.ndarray]:
    """(reflector pixels, shadow pixels) from the polar geometry about the probe."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ox, oy = scene.probe_origin
    r = np.hypot(xs - ox, ys - oy)
    phi = np.arctan2(ys - oy, xs - ox)
    refl = np.zeros(shape, bool)
    shad = np.zeros(shape, bool)
    for rf in scene.reflectors:
        in_arc = (phi >= rf.phi0) & (phi <= rf.phi1)
        near = r - rf.radius
        refl |= in_arc & (np.abs(near) <= rf.thickness / 2)
        shad |= in_arc & (near > rf.thickness / 2) & (near <= rf.thickness / 2 + rf.shadow_length)
    return refl, shad & ~refl


def render_labels(scene: PhantomScene, shape) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Truth label map plus the geometric masks used for rendering."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    e = scene.abdomen
    lev = np.sqrt(ellipse_level(e, xs, ys))
    t = _ellipse_param(e, xs, ys)
    wob = np.zeros_like(t)
    for k, amp in enumerate(scene.af_wobble):
        wob += amp * np.sin((k + 2) * t + k)
    gap_start, gap_len = scene.af_gap
    in_gap = ((t - gap_start) % (2 * np.pi)) < gap_len
    inside = lev <= 1.0
    wall = (lev > 1.0) & (lev <= scene.af_inner_scale)
    af = (lev > scene.af_inner_scale) & (lev <= scene.af_outer_scale + wob) & ~in_gap

    sb = np.zeros(shape, bool)
    if scene.sb is not None:
        sx, sy, rx, ry, ang = scene.sb
        c, s = math.cos(ang), math.sin(ang)
        u = (c * (xs - sx) + s * (ys - sy)) / rx
        v = (-s * (xs - sx) + c * (ys - sy)) / ry
        sb = (u * u + v * v <= 1.0) & inside
    uv = _polyline_mask(xs, ys, scene.uv, scene.uv_width) & inside & ~sb
    refl, shad = shadow_mask(scene, shape)

    labels = np.zeros(shape, np.uint8)
    labels[af] = ClassLabel.AF
    labels[sb] = ClassLabel.SB
    labels[uv] = ClassLabel.UV
    labels[shad] = ClassLabel.SA
    labels[refl] = 0
    masks = {"inside": inside, "wall": wall, "reflector": refl, "shadow": shad}
    return labels, masks


def render_image(scene: PhantomScene, labels: np.ndarray, masks: dict, rng: np.random.Generator,
                 speckle: SpeckleConfig) -> np.ndarray:
    h, w = labels.shape
    echo = np.full((h, w), speckle.tissue)
    # slow background texture
    echo *= 1.0 + 0.25 * ndimage.gaussian_filter(rng.standard_normal((h, w)), 8.0) * 8.0
    echo[masks["inside"]] = speckle.abdomen
    echo[masks["wall"]] = speckle.wall
    k = speckle.speckle_shape
    sp = rng.gamma(k, 1.0 / k, size=(h, w))
    if speckle.speckle_blur > 0:
        sp = ndimage.gaussian_filter(sp, speckle.speckle_blur)
    img = echo * sp
    img[masks["shadow"]] *= speckle.shadow_attenuation
    dark = labels != 0
    img[dark] = np.minimum(img[dark], speckle.dark_level * rng.random(int(dark.sum())))
    img[~dark] = np.maximum(img[~dark], speckle.tissue_floor)
    img[masks["reflector"]] = speckle.reflector
    img = np.clip(img, 0.0, 1.0)
    out = np.round(img * 255).astype(np.uint8)
    # brightest pixel pinned so the anechoic threshold is fixed at 25.5
    out[masks["reflector"]] = 255
    return out


@dataclass
class Phantom:
    image: UltrasoundImage
    labels: np.ndarray
    scene: PhantomScene


def _phantom(seed: int, config: PhantomConfig, false_mode: str | None) -> Phantom:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC]))
    scene = _make_scene(rng, config, false_mode, seed)
    shape = (config.height, config.width)
    labels, masks = render_labels(scene, shape)
    pixels = render_image(scene, labels, masks, rng, config.speckle)
    img = UltrasoundImage(
        pixels, config.pixel_spacing_mm, scene.probe_origin, scene.fan_degrees, image_id=f"seed{seed}"
    )
    return Phantom(img, labels, scene)


def generate_phantom(seed: int, config: PhantomConfig = PhantomConfig()) -> Phantom:
    """A true AC plane: stomach bubble, bent umbilical vein, admissible abdomen."""
    return _phantom(seed, config, None)


def generate_false_plane(seed: int, config: PhantomConfig = PhantomConfig(), mode: str | None = None) -> Phantom:
    """A plane with at least one landmark violation (``mode`` from FALSE_MODES)."""
    if mode is None:
        mode = FALSE_MODES[int(np.random.default_rng([int(seed), 0xFA]).integers(len(FALSE_MODES)))]
    if mode not in FALSE_MODES:
        raise ConfigError(f"unknown false-plane mode {mode!r}")
    return _phantom(seed, config, mode)


@dataclass
class DatasetItem:
    id: str
    phantom: Phantom
    split: str


def _split(n: int, rng: np.random.Generator, train_fraction: float) -> np.ndarray:
    is_train = np.zeros(n, bool)
    is_train[rng.permutation(n)[: int(round(n * train_fraction))]] = True
    return is_train


def generate_dataset(
    n_true: int,
    n_false: int,
    seed: int,
    config: PhantomConfig = PhantomConfig(),
    train_fraction: float = 2.0 / 3.0,
) -> list[DatasetItem]:
    """Deterministic mix of true and false planes with a stratified split."""
    if n_true < 0 or n_false < 0 or n_true + n_false < 1:
        raise ConfigError("need n_true + n_false >= 1")
    ss = np.random.SeedSequence(int(seed))
    child = ss.spawn(n_true + n_false + 1)
    split_rng = np.random.default_rng(child[-1])
    tr_true = _split(n_true, split_rng, train_fraction)
    tr_false = _split(n_false, split_rng, train_fraction)
    items = []
    for i in range(n_true + n_false):
        s = int(child[i].generate_state(1)[0])
        if i < n_true:
            ph, is_tr = generate_phantom(s, config), tr_true[i]
        else:
            ph, is_tr = generate_false_plane(s, config), tr_false[i - n_true]
        pid = f"p{i:04d}"
        ph.image.image_id = pid
        items.append(DatasetItem(pid, ph, "train" if is_tr else "test"))
    return items


def write_dataset(items: list[DatasetItem], out_dir, header: dict | None = None) -> Path:
    """Write PGM images, label maps, sidecars and ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in items:
        ph = it.phantom
        img_p = out / "images" / f"{it.id}.pgm"
        lab_p = out / "labels" / f"{it.id}.pgm"
        side_p = out / "images" / f"{it.id}.txt"
        write_pgm(img_p, ph.image.pixels)
        write_pgm(lab_p, ph.labels)
        ox, oy = ph.image.probe_origin
        write_sidecar(side_p, Sidecar(ox, oy, ph.image.pixel_spacing_mm))
        e = ph.scene.abdomen
        fields = {
            "split": it.split,
            "true_plane": ph.scene.is_true_plane,
            "false_mode": ph.scene.false_mode or "none",
            "cx": round(e.cx, 6), "cy": round(e.cy, 6), "a": round(e.a, 6),
            "b": round(e.b, 6), "theta": round(e.theta, 6),
            "ac_pixels": round(ph.scene.ac_pixels, 6),
            "scene": ph.scene.digest()[:16],
        }
        entries.append(ManifestEntry(it.id, relpath(img_p, out), relpath(lab_p, out), relpath(side_p, out), fields))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries, header)
    return manifest


def truth_ellipse(entry: ManifestEntry) -> Ellipse:
    f = entry.fields
    return Ellipse(float(f["cx"]), float(f["cy"]), float(f["a"]), float(f["b"]), float(f["theta"]))
