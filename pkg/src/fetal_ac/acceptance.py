"""Plane acceptance: crop the semantic map to the fitted abdomen and score it.

The crop is the ellipse's axis-aligned bounding box plus a 5% margin,
bilinearly resampled to a square of ``input_size``; SB, UV and AF occupancy
fill channels 0, 1 and 2, while shadow and unlabeled pixels stay zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .ellipse import Ellipse, MeasureConfig, measure_ac
from .errors import FetalACError, InputError, ParameterError
from .nn import (
    AdamConfig,
    LayerSpec,
    NetParams,
    Sequential,
    adam_step,
    init_gaussian,
    load_weights,
    save_weights,
    shape_trace,
    softmax,
    softmax_cross_entropy,
)
from .patches import ClassLabel

log = logging.getLogger(__name__)

CHANNELS = (ClassLabel.SB, ClassLabel.UV, ClassLabel.AF)
N_AUGMENT = 36


@dataclass(frozen=True)
class AcceptanceConfig:
    """Geometry of the acceptance network; the default is the full-size one."""

    input_size: int = 128
    layers: tuple[LayerSpec, ...] = (
        LayerSpec.conv(5, 64),
        LayerSpec.pool(3, 3, "floor"),
        LayerSpec.conv(3, 128),
        LayerSpec.pool(2, 2, "ceil"),
        LayerSpec.fc(256),
        LayerSpec.fc(512),
        LayerSpec.fc(2, "none"),
    )
    dropout: float = 0.5
    init_std: float = 0.01
    margin: float = 0.05

    @classmethod
    def compact(cls) -> "AcceptanceConfig":
        return cls(
            input_size=32,
            layers=(
                LayerSpec.conv(5, 16),
                LayerSpec.pool(3, 3, "floor"),
                LayerSpec.conv(3, 32),
                LayerSpec.pool(2, 2, "ceil"),
                LayerSpec.fc(64),
                LayerSpec.fc(128),
                LayerSpec.fc(2, "none"),
            ),
        )

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "layers": [s.to_dict() for s in self.layers],
            "dropout": self.dropout,
            "init_std": self.init_std,
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcceptanceConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**s) for s in d["layers"])
        return cls(**d)


class AcceptanceNet:
    """Binary plane classifier; output index 1 is the "true plane" class."""

    def __init__(self, config: AcceptanceConfig = AcceptanceConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        s = config.input_size
        self.net = Sequential((s, s, 3), config.layers, dtype, prefix="accept.")
        rng_w, rng_drop = (np.random.default_rng(c) for c in np.random.SeedSequence(self.seed).spawn(2))
        if config.dropout > 0:
            fc_idx = [i for i, sp in enumerate(config.layers) if sp.kind == "fully-connected"]
            self.net.insert_dropout(fc_idx[-2], config.dropout, rng_drop)
        init_gaussian(self.net.named_params(), rng_w, config.init_std)
        self.params = NetParams(self.net.named_params(), rng_seed=self.seed)

    def shape_trace(self) -> list[tuple]:
        s = self.config.input_size
        return shape_trace((s, s, 3), self.config.layers)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.net.forward(np.asarray(x, self.net.dtype), train)

    def backward(self, dlogits: np.ndarray):
        self.net.backward(dlogits.astype(self.net.dtype, copy=False))
        return self.net.named_grads()

    def probability_true(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 3
        x = x[None] if single else x
        out = [softmax(self.forward(x[i : i + batch]).astype(np.float64))[:, 1] for i in range(0, len(x), batch)]
        p = np.concatenate(out) if out else np.zeros(0)
        return p[0] if single else p

    def arch(self) -> dict:
        return {"type": "plane-acceptance", "config": self.config.to_dict(), "seed": self.seed}


def save_acceptance(path, net: AcceptanceNet, threshold: float) -> None:
    arch = dict(net.arch(), threshold=float(threshold))
    save_weights(path, arch, net.params.arrays)


def load_acceptance(path) -> tuple[AcceptanceNet, float]:
    arch, arrays, _ = load_weights(path)
    if arch.get("type") != "plane-acceptance":
        raise ParameterError(f"{path}: not an acceptance weight file")
    net = AcceptanceNet(AcceptanceConfig.from_dict(arch["config"]), arch["seed"])
    net.params.load_arrays(arrays)
    return net, float(arch.get("threshold", 0.5))


def crop_box(ellipse: Ellipse, margin: float = 0.05) -> tuple[float, float, float, float]:
    """Bounding box ``(x0, y0, x1, y1)`` in pixel-edge coordinates, grown by ``margin``."""
    c, s = np.cos(ellipse.theta), np.sin(ellipse.theta)
    hw = np.hypot(ellipse.a * c, ellipse.b * s) * (1.0 + margin)
    hh = np.hypot(ellipse.a * s, ellipse.b * c) * (1.0 + margin)
    return ellipse.cx - hw, ellipse.cy - hh, ellipse.cx + hw, ellipse.cy + hh


def crop_and_rescale(labels: np.ndarray, ellipse: Ellipse | None = None, size: int = 128,
                     margin: float = 0.05, box: tuple[float, float, float, float] | None = None) -> np.ndarray:
    """``size x size x 3`` occupancy image of SB/UV/AF inside the ellipse's box.

    Pixel ``j`` of the output samples source coordinate
    ``x0 + (j + 0.5) * (x1 - x0) / size`` (pixel centres sit at integers,
    so pixel ``i`` spans ``[i - 0.5, i + 0.5]``); the box
    ``(-0.5, -0.5, size - 0.5, size - 0.5)`` is copied verbatim.
    """
    labels = np.asarray(labels)
    if box is None:
        if ellipse is None:
            raise ParameterError("need an ellipse or an explicit box")
        box = crop_box(ellipse, margin)
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0) or not np.all(np.isfinite(box)):
        raise InputError("degenerate crop box")
    h, w = labels.shape
    if x1 <= -0.5 or y1 <= -0.5 or x0 >= w - 0.5 or y0 >= h - 0.5:
        raise InputError("crop box does not intersect the map")
    t = (np.arange(size) + 0.5) / size
    xs = x0 + t * (x1 - x0)
    ys = y0 + t * (y1 - y0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((size, size, 3), np.float32)
    for k, cls in enumerate(CHANNELS):
        occ = (labels == int(cls)).astype(np.float64)
        out[..., k] = ndimage.map_coordinates(occ, [yy, xx], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def augment(x: np.ndarray) -> np.ndarray:
    """18 rotations (0, 20, ..., 340 degrees) times {identity, left-right mirror}."""
    x = np.asarray(x, np.float32)
    out = []
    for mirror in (False, True):
        base = x[:, ::-1] if mirror else x
        for deg in range(0, 360, 20):
            if deg == 0:
                out.append(base.copy())
            else:
                r = ndimage.rotate(base, deg, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
                out.append(np.clip(r, 0.0, 1.0))
    return np.stack(out)


def accuracy_at(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    return float(np.mean((np.asarray(scores) >= threshold) == np.asarray(labels, bool)))


def select_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy-maximising threshold over midpoints of the sorted distinct scores.

    Candidates also include one value below the minimum and one above the
    maximum; ties go to the candidate nearest 0.5, then the lowest.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, bool)
    if scores.size == 0:
        raise ParameterError("no scores")
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1e-6], (u[:-1] + u[1:]) / 2, [u[-1] + 1e-6]])
    accs = np.array([accuracy_at(scores, labels, t) for t in cands])
    best = np.flatnonzero(accs == accs.max())
    pick = best[np.argmin(np.abs(cands[best] - 0.5))]
    return float(cands[pick]), float(accs[pick])


@dataclass(frozen=True)
class AcceptanceTrainConfig:
    iterations: int = 3000
    batch_size: int = 64
    seed: int = 0
    adam: AdamConfig = AdamConfig()
    augment: bool = True


@dataclass
class AcceptanceResult:
    net: AcceptanceNet
    threshold: float
    test_accuracy: float
    test_scores: np.ndarray
    loss_curve: list[float] = field(default_factory=list)


def train_acceptance(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                     config: AcceptanceConfig = AcceptanceConfig(),
                     cfg: AcceptanceTrainConfig = AcceptanceTrainConfig()) -> AcceptanceResult:
    """Train on (augmented) crops, then pick the threshold on the held-out split."""
    train_y = np.asarray(train_y, bool)
    test_y = np.asarray(test_y, bool)
    for name, y in (("training", train_y), ("test", test_y)):
        if y.size == 0 or y.all() or not y.any():
            raise ParameterError(f"{name} split must contain both true and false planes")
    if cfg.augment:
        xs = np.concatenate([augment(x) for x in train_x])
        ys = np.repeat(train_y, N_AUGMENT)
    else:
        xs, ys = np.asarray(train_x, np.float32), train_y
    ys = ys.astype(np.int64)
    net = AcceptanceNet(config, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xACC]))
    order, pos, losses = rng.permutation(len(xs)), 0, []
    for _ in range(cfg.iterations):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(xs)), 0
        idx = np.sort(order[pos : pos + cfg.batch_size])
        pos += cfg.batch_size
        loss, d = softmax_cross_entropy(net.forward(xs[idx], train=True), ys[idx])
        adam_step(net.params, net.backward(d), cfg.adam)
        losses.append(loss)
    scores = net.probability_true(test_x)
    thr, acc = select_threshold(scores, test_y)
    return AcceptanceResult(net, thr, acc, scores, losses)


@dataclass(frozen=True)
class AcceptanceDecision:
    probability_true: float
    threshold: float
    accepted: bool
    reason: str = ""

    @classmethod
    def decide(cls, p: float, threshold: float, reason: str = "") -> "AcceptanceDecision":
        return cls(float(p), float(threshold), bool(p >= threshold), reason)

    def to_dict(self) -> dict:
        d = {"probability_true": self.probability_true, "threshold": self.threshold, "accepted": self.accepted}
        if self.reason:
            d["reason"] = self.reason
        return d


def check_plane(net: AcceptanceNet, threshold: float, labels: np.ndarray, ellipse: Ellipse) -> AcceptanceDecision:
    """Score one plane given its semantic map and fitted abdomen ellipse."""
    x = crop_and_rescale(labels, ellipse, net.config.input_size, net.config.margin)
    return AcceptanceDecision.decide(net.probability_true(x), threshold)


def plane_input(labels: np.ndarray, size: int, margin: float = 0.05,
                measure: MeasureConfig = MeasureConfig()) -> np.ndarray | None:
    """Crop for a semantic map via its measured ellipse, or None when no AC can be fitted."""
    try:
        m = measure_ac(labels, config=measure)
    except FetalACError as exc:
        log.info("no ellipse for acceptance crop: %s", exc)
        return None
    return crop_and_rescale(labels, m.ellipse, size, margin)


def assess_plane(net: AcceptanceNet, threshold: float, labels: np.ndarray,
                 measure: MeasureConfig = MeasureConfig()) -> AcceptanceDecision:
    """Full decision: planes whose abdomen cannot be fitted are rejected outright."""
    x = plane_input(labels, net.config.input_size, net.config.margin, measure)
    if x is None:
        return AcceptanceDecision(0.0, float(threshold), False, "no-ellipse")
    return AcceptanceDecision.decide(net.probability_true(x), threshold)
