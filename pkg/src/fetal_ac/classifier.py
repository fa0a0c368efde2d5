"""Three-branch patch classifier: normal view, wide view, propagation direction.

The two image branches are conv/pool/conv/pool/fc stacks; the direction
branch is a single 2->4 ReLU layer whose weight rows ("directional filters")
are either Gaussian or spread evenly across the imaging fan. Branch outputs
are concatenated and classified by a fully connected head.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParameterError
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
from .nn.layers import Dense
from .patches import (
    N_CLASSES,
    UNLABELED,
    ClassLabel,
    PatchSample,
    PatchSet,
    UltrasoundImage,
    ViewExtractor,
    anechoic_mask,
    fan_range,
    propagation_directions,
)

log = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
UNIFORM = "uniform_toward_range"
DIR_INIT_MODES = (GAUSSIAN, UNIFORM)


@dataclass(frozen=True)
class ClassifierConfig:
    """Layer geometry of the classifier.

    The default is the full-size geometry (128x128 views, 7x7x64 and
    3x3x128 convolutions, 256-wide branch outputs, 1024/2048 head).
    ``compact()`` keeps the same topology at a size that trains on one CPU.
    """

    view_size: int = 128
    branch: tuple[LayerSpec, ...] = (
        LayerSpec.conv(7, 64),
        LayerSpec.pool(3, 3, "ceil"),
        LayerSpec.conv(3, 128),
        LayerSpec.pool(3, 3, "ceil"),
        LayerSpec.fc(256),
    )
    n_dir_filters: int = 4
    head: tuple[int, ...] = (1024, 2048)
    n_classes: int = N_CLASSES
    dropout: float = 0.5
    init_std: float = 0.01
    dir_gaussian_std: float = 1.0

    @classmethod
    def compact(cls) -> "ClassifierConfig":
        return cls(
            view_size=32,
            branch=(
                LayerSpec.conv(5, 16),
                LayerSpec.pool(2, 2),
                LayerSpec.conv(3, 32),
                LayerSpec.pool(2, 2),
                LayerSpec.fc(64),
            ),
            head=(128, 128),
        )

    def to_dict(self) -> dict:
        return {
            "view_size": self.view_size,
            "branch": [s.to_dict() for s in self.branch],
            "n_dir_filters": self.n_dir_filters,
            "head": list(self.head),
            "n_classes": self.n_classes,
            "dropout": self.dropout,
            "init_std": self.init_std,
            "dir_gaussian_std": self.dir_gaussian_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        d["branch"] = tuple(LayerSpec(**s) for s in d["branch"])
        d["head"] = tuple(d["head"])
        return cls(**d)


def init_direction_filters(
    mode: str,
    count: int = 4,
    angular_range: tuple[float, float] | None = None,
    rng: np.random.Generator | None = None,
    std: float = 1.0,
) -> np.ndarray:
    """Initial directional filters, one 2-vector per row.

    ``uniform_toward_range`` places unit vectors at equally spaced angles
    covering ``angular_range`` (degrees from +x toward +y, i.e. 90 is
    straight down the image). ``gaussian`` draws i.i.d. normal components.
    """
    if mode == UNIFORM:
        if angular_range is None or angular_range[1] <= angular_range[0]:
            raise ParameterError("uniform initialisation needs a non-empty angular range")
        ang = np.radians(np.linspace(angular_range[0], angular_range[1], count))
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if mode == GAUSSIAN:
        if rng is None:
            raise ParameterError("gaussian initialisation needs an rng")
        return rng.normal(0.0, std, size=(count, 2))
    raise ParameterError(f"unknown direction init mode {mode!r}")


def dead_filters(filters: np.ndarray, angular_range: tuple[float, float], n: int = 721) -> np.ndarray:
    """Filters whose inner product is non-positive for every in-fan direction."""
    ang = np.radians(np.linspace(angular_range[0], angular_range[1], n))
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return np.all(filters @ dirs.T <= 0, axis=1)


class ClassifierNet:
    """Forward/backward over batches of (normal, wide, direction) inputs."""

    def __init__(self, config: ClassifierConfig, seed: int = 0, dir_init: str = UNIFORM,
                 fan_degrees: tuple[float, float] | None = None, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dir_init = dir_init
        self.fan_degrees = fan_degrees
        self.dtype = dtype
        p = config.view_size
        self.normal = Sequential((p, p, 1), config.branch, dtype, prefix="normal.")
        self.wide = Sequential((p, p, 1), config.branch, dtype, prefix="wide.")
        self.dir = Sequential((2,), [LayerSpec.fc(config.n_dir_filters)], dtype, prefix="dir.")
        n_feat = int(np.prod(self.normal.out_shape)) * 2 + config.n_dir_filters
        self.concat_size = n_feat
        head_specs = [LayerSpec.fc(n) for n in config.head] + [LayerSpec.fc(config.n_classes, "none")]
        self.head = Sequential((n_feat,), head_specs, dtype, prefix="head.")
        ss = np.random.SeedSequence(self.seed)
        rng_normal, rng_wide, rng_head, rng_dir, rng_drop = (np.random.default_rng(s) for s in ss.spawn(5))
        if config.dropout > 0:
            # dropout on the output of the last hidden layer
            self.head.insert_dropout(len(config.head) - 1, config.dropout, rng_drop)
        init_gaussian(self.normal.named_params(), rng_normal, config.init_std)
        init_gaussian(self.wide.named_params(), rng_wide, config.init_std)
        init_gaussian(self.head.named_params(), rng_head, config.init_std)
        dir_layer: Dense = self.dir.layers[0]
        filt = init_direction_filters(dir_init, config.n_dir_filters, fan_degrees, rng_dir, config.dir_gaussian_std)
        dir_layer.params["W"][...] = filt.T
        dir_layer.params["b"][...] = 0
        self.params = NetParams(self.named_params(), rng_seed=self.seed)
        self._split = None

    @property
    def direction_filters(self) -> np.ndarray:
        return self.dir.layers[0].params["W"].T.copy()

    def stacks(self):
        return (self.normal, self.wide, self.dir, self.head)

    def named_params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for s in self.stacks():
            out.update(s.named_params())
        return out

    def named_grads(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for s in self.stacks():
            out.update(s.named_grads())
        return out

    def shape_trace(self) -> dict[str, list[tuple]]:
        p = self.config.view_size
        head_specs = [LayerSpec.fc(n) for n in self.config.head] + [LayerSpec.fc(self.config.n_classes, "none")]
        return {
            "normal": shape_trace((p, p, 1), self.config.branch),
            "wide": shape_trace((p, p, 1), self.config.branch),
            "direction": shape_trace((2,), [LayerSpec.fc(self.config.n_dir_filters)]),
            "concat": [(self.concat_size,)],
            "head": shape_trace((self.concat_size,), head_specs),
        }

    def forward(self, normal: np.ndarray, wide: np.ndarray, direction: np.ndarray, train: bool = False) -> np.ndarray:
        """Logits ``(N, n_classes)``; views are ``(N, P, P)`` or ``(N, P, P, 1)``."""
        dt = self.dtype
        if normal.ndim == 3:
            normal = normal[..., None]
        if wide.ndim == 3:
            wide = wide[..., None]
        fn = self.normal.forward(normal.astype(dt, copy=False), train)
        fw = self.wide.forward(wide.astype(dt, copy=False), train)
        fd = self.dir.forward(np.asarray(direction, dt).reshape(-1, 2), train)
        self._split = (fn.shape[1], fw.shape[1])
        return self.head.forward(np.concatenate([fn, fw, fd], axis=1), train)

    def backward(self, dlogits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        dcat = self.head.backward(dlogits.astype(self.dtype, copy=False))
        n1, n2 = self._split
        self.normal.backward(dcat[:, :n1])
        self.wide.backward(dcat[:, n1 : n1 + n2])
        self.dir.backward(dcat[:, n1 + n2 :])
        return self.named_grads()

    def loss_and_grads(self, normal, wide, direction, labels, train: bool = True):
        logits = self.forward(normal, wide, direction, train)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits)

    def predict_proba(self, normal, wide, direction, batch: int = 512) -> np.ndarray:
        out = []
        for i in range(0, len(direction), batch):
            sl = slice(i, i + batch)
            out.append(softmax(self.forward(normal[sl], wide[sl], direction[sl]).astype(np.float64)))
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out)

    def arch(self) -> dict:
        return {
            "type": "abdomen-classifier",
            "config": self.config.to_dict(),
            "seed": self.seed,
            "dir_init": self.dir_init,
            "fan_degrees": list(self.fan_degrees) if self.fan_degrees else None,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "ClassifierNet":
        fan = tuple(arch["fan_degrees"]) if arch.get("fan_degrees") else None
        return cls(ClassifierConfig.from_dict(arch["config"]), arch["seed"], arch["dir_init"], fan)


def save_classifier(path, net: ClassifierNet, with_optimizer: bool = True) -> None:
    save_weights(path, net.arch(), net.params.arrays, net.params.adam if with_optimizer else None)


def load_classifier(path) -> ClassifierNet:
    arch, arrays, adam = load_weights(path)
    if arch.get("type") != "abdomen-classifier":
        raise ParameterError(f"{path}: not a classifier weight file")
    net = ClassifierNet.from_arch(arch)
    net.params.load_arrays(arrays)
    if adam is not None:
        net.params.adam = adam
    return net


def build_classifier(seed: int = 0, dir_init: str = UNIFORM, config: ClassifierConfig | None = None,
                     fan_degrees: tuple[float, float] | None = None, dtype=np.float32) -> ClassifierNet:
    config = config or ClassifierConfig()
    if dir_init not in DIR_INIT_MODES:
        raise ParameterError(f"unknown direction init mode {dir_init!r}")
    if dir_init == UNIFORM and fan_degrees is None:
        fan_degrees = fan_range((256, 256), (127.5, -25.6))
    return ClassifierNet(config, seed, dir_init, fan_degrees, dtype)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 64
    eval_every: int = 100
    eval_max: int = 2000
    seed: int = 0
    adam: AdamConfig = AdamConfig()
    target_accuracy: float | None = None  # stop once test accuracy reaches this


@dataclass
class LearningCurve:
    iteration: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.iteration)

    def first_reaching(self, accuracy: float) -> int | None:
        for it, acc in zip(self.iteration, self.test_accuracy):
            if acc >= accuracy:
                return it
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "train_loss", "test_accuracy"])
            for row in zip(self.iteration, self.train_loss, self.test_accuracy):
                w.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])


def patch_accuracy(net: ClassifierNet, data: PatchSet, limit: int | None = None) -> float:
    if len(data) == 0:
        return float("nan")
    n = len(data) if limit is None else min(limit, len(data))
    prob = net.predict_proba(data.normal[:n], data.wide[:n], data.direction[:n])
    return float(np.mean(prob.argmax(axis=1) == data.labels[:n]))


def train_classifier(net: ClassifierNet, dataset: PatchSet, cfg: TrainConfig = TrainConfig(),
                     progress=None) -> LearningCurve:
    """Mini-batch Adam on the train split; evaluates on the test split every ``eval_every``."""
    train, test = dataset.train, dataset.test
    if len(train) == 0:
        raise ParameterError("training split is empty")
    curve = LearningCurve()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    # fixed evaluation subset so curves are comparable across runs
    eval_idx = np.sort(rng.permutation(len(test))[: cfg.eval_max]) if len(test) else np.zeros(0, int)
    eval_set = test.subset(eval_idx)
    order, pos = rng.permutation(len(train)), 0
    running = []
    for it in range(1, cfg.iterations + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(train)), 0
        idx = np.sort(order[pos : pos + cfg.batch_size])
        pos += cfg.batch_size
        loss, grads = net.loss_and_grads(train.normal[idx], train.wide[idx], train.direction[idx], train.labels[idx])
        adam_step(net.params, grads, cfg.adam)
        running.append(loss)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            acc = patch_accuracy(net, eval_set) if len(eval_set) else float("nan")
            curve.iteration.append(it)
            curve.train_loss.append(float(np.mean(running)))
            curve.test_accuracy.append(acc)
            running = []
            if progress:
                progress(it, curve.train_loss[-1], acc)
            if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                break
    return curve


def classify_patch(net: ClassifierNet, sample: PatchSample) -> np.ndarray:
    """Posterior over (SB, UV, AF, SA) for one sample; inference only."""
    d = np.asarray(sample.direction, np.float64)
    if d.shape != (2,) or abs(math.hypot(*d) - 1.0) > 1e-6:
        raise InputError("direction must be a unit 2-vector")
    p = net.config.view_size
    for v in (sample.normal_view, sample.wide_view):
        if v.shape[:2] != (p, p):
            raise InputError(f"views must be {p}x{p}")
        if v.min() < 0 or v.max() > 1:
            raise InputError("patch values must lie in [0, 1]")
    return net.predict_proba(sample.normal_view[None], sample.wide_view[None], d[None])[0]


@dataclass
class SemanticMap:
    """Per-pixel palette codes (0 = unlabeled, 1..4 = SB/UV/AF/SA)."""

    labels: np.ndarray
    max_posterior: np.ndarray | None = None

    @property
    def shape(self):
        return self.labels.shape

    def count(self, cls: ClassLabel) -> int:
        return int(np.count_nonzero(self.labels == int(cls)))


def semantic_map(image: UltrasoundImage, net: ClassifierNet, batch: int = 1024) -> SemanticMap:
    """Label every anechoic pixel with the classifier's argmax class."""
    mask = anechoic_mask(image)
    rows, cols = np.nonzero(mask)
    labels = np.zeros(image.shape, np.uint8)
    post = np.zeros(image.shape, np.float32)
    if rows.size == 0:
        return SemanticMap(labels, post)
    ex = ViewExtractor(image.pixels, net.config.view_size)
    dirs = propagation_directions(rows, cols, image.probe_origin)
    for i in range(0, rows.size, batch):
        r, c = rows[i : i + batch], cols[i : i + batch]
        prob = softmax(net.forward(ex.normal(r, c), ex.wide(r, c), dirs[i : i + batch]).astype(np.float64))
        labels[r, c] = prob.argmax(axis=1) + 1
        post[r, c] = prob.max(axis=1)
    return SemanticMap(labels, post)


PALETTE = np.array(
    [[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255], [128, 128, 128]], np.uint8
)


def render_map_rgb(labels: np.ndarray) -> np.ndarray:
    """SB red, UV green, AF blue, SA gray, unlabeled black."""
    return PALETTE[np.asarray(labels)]


def render_overlay(pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grayscale image with labelled pixels painted in their class colour."""
    rgb = np.repeat(np.asarray(pixels, np.uint8)[..., None], 3, axis=2)
    lab = np.asarray(labels)
    painted = lab != UNLABELED
    rgb[painted] = PALETTE[lab[painted]]
    return rgb
