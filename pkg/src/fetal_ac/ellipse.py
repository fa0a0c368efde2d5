"""Abdominal contour fitting on the amniotic-fluid region of a semantic map.

Boundary pixels of the AF region feed a randomized Hough transform that
samples point pairs with parallel tangents as the ends of a diameter and
votes for the conjugate half-diameter in a 1-D accumulator. Candidates are screened by axis ratio and AF
content, aggregated by medians, shrunk by a fixed factor and turned into a
circumference with Ramanujan's perimeter approximation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyRegionError, InputError, NoCandidateError
from .patches import ClassLabel


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in pixel coordinates (x = column, y = row, y pointing down).

    ``theta`` is the angle of the major axis from the +x axis toward +y,
    normalised to ``[0, pi)``.
    """

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    votes: int = field(default=0, compare=False)

    def __post_init__(self):
        a, b, t = float(self.a), float(self.b), float(self.theta)
        if b > a:
            a, b, t = b, a, t + math.pi / 2
        if not b > 0:
            raise InputError(f"ellipse axes must be positive, got a={a}, b={b}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", t % math.pi)

    @property
    def ratio(self) -> float:
        return self.b / self.a

    def scaled(self, s: float) -> "Ellipse":
        return replace(self, a=self.a * s, b=self.b * s)

    def perimeter(self) -> float:
        return ramanujan_perimeter(self.a, self.b)

    def bbox(self) -> tuple[float, float, float, float]:
        """Axis-aligned bounding box ``(x0, y0, x1, y1)``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hx = math.hypot(self.a * c, self.b * s)
        hy = math.hypot(self.a * s, self.b * c)
        return self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy

    def points(self, n: int = 360) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = self.a * np.cos(t)
        y = self.b * np.sin(t)
        return np.stack([self.cx + c * x - s * y, self.cy + s * x + c * y], axis=1)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "theta": self.theta}


def ramanujan_perimeter(a: float, b: float) -> float:
    """pi [3(a+b) - sqrt((3a+b)(a+3b))]."""
    return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))


def ellipse_level(e: Ellipse, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Implicit function value; <= 1 inside the ellipse."""
    c, s = math.cos(e.theta), math.sin(e.theta)
    dx, dy = xs - e.cx, ys - e.cy
    u = (c * dx + s * dy) / e.a
    v = (-s * dx + c * dy) / e.b
    return u * u + v * v


def ellipse_mask(e: Ellipse, shape: tuple[int, int], shrink: float = 0.0) -> np.ndarray:
    """Pixels whose centres lie inside ``e`` (optionally shrunk by ``shrink`` px)."""
    h, w = shape
    mask = np.zeros((h, w), bool)
    x0, y0, x1, y1 = e.bbox()
    r0, r1 = max(0, int(math.floor(y0))), min(h - 1, int(math.ceil(y1)))
    c0, c1 = max(0, int(math.floor(x0))), min(w - 1, int(math.ceil(x1)))
    if r0 > r1 or c0 > c1:
        return mask
    inner = e
    if shrink > 0:
        if e.b <= shrink:
            return mask
        inner = replace(e, a=e.a - shrink, b=e.b - shrink)
    ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    mask[r0 : r1 + 1, c0 : c1 + 1] = ellipse_level(inner, xs, ys) <= 1.0
    return mask


def af_region(label_map: np.ndarray, min_component: int = 20) -> np.ndarray:
    """AF pixels with 8-connected specks smaller than ``min_component`` removed."""
    af = np.asarray(label_map) == int(ClassLabel.AF)
    lab, n = ndimage.label(af, structure=np.ones((3, 3), int))
    if n == 0:
        return af
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_component
    keep[0] = False
    return keep[lab]


def region_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image edge counts)."""
    m = np.pad(mask, 1, constant_values=False)
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask & ~interior


def af_boundary(label_map: np.ndarray, min_component: int = 20) -> np.ndarray:
    """Boundary points ``(x, y)`` of the cleaned AF region, shape ``(N, 2)``."""
    label_map = np.asarray(label_map)
    if not np.any(label_map == int(ClassLabel.AF)):
        raise EmptyRegionError("semantic map contains no AF pixels")
    edge = region_boundary(af_region(label_map, min_component))
    rows, cols = np.nonzero(edge)
    return np.stack([cols, rows], axis=1).astype(np.float64)


@dataclass(frozen=True)
class HoughConfig:
    """Randomized Hough settings.

    Major-axis bounds are *semi*-axis lengths. When ``min_a``/``max_a`` are
    None they default to ``min_a_frac``/``max_a_frac`` of the image width.
    """

    n_candidates: int = 25
    max_pairs: int = 4000
    min_a: float | None = None
    max_a: float | None = None
    min_a_frac: float = 0.15
    max_a_frac: float = 0.6
    min_b: float = 5.0
    min_votes: int | None = None
    min_votes_frac: float = 0.05
    bin_width: float = 1.0
    tangent_tol_deg: float = 6.0
    tangent_radius: float = 4.0
    min_chord_sin: float = 0.5
    min_sin_tau: float = 0.2
    min_ratio_prior: float = 0.3
    batch: int = 64
    seed: int = 0

    def bounds(self, width: float | None, points: np.ndarray) -> tuple[float, float]:
        if width is None:
            span = np.ptp(points, axis=0).max() if len(points) else 0.0
            width = max(span, 1.0)
        lo = self.min_a if self.min_a is not None else self.min_a_frac * width
        hi = self.max_a if self.max_a is not None else self.max_a_frac * width
        return float(lo), float(hi)


def _tangent_angles(points: np.ndarray, radius: float) -> np.ndarray:
    """Local tangent direction (radians, mod pi) by PCA of neighbours."""
    tree = cKDTree(points)
    nbrs = tree.query_ball_point(points, r=radius)
    ang = np.zeros(len(points))
    for i, idx in enumerate(nbrs):
        if len(idx) < 3:
            ang[i] = np.nan
            continue
        q = points[idx] - points[idx].mean(axis=0)
        cov = q.T @ q
        # principal axis angle of a 2x2 covariance
        ang[i] = 0.5 * math.atan2(2 * cov[0, 1], cov[0, 0] - cov[1, 1])
    return ang


def _candidate_pairs(points, tangents, lo, hi, cfg: "HoughConfig"):
    """Index pairs (i < j) that can be the two ends of a diameter.

    Ends of a diameter have parallel tangents; the chord must also cross the
    tangent at a clear angle and its half-length lie in ``[min_b, hi]``.
    """
    n = len(points)
    par = math.sin(math.radians(cfg.tangent_tol_deg))
    ct, st = np.cos(tangents), np.sin(tangents)
    out_i, out_j = [], []
    for start in range(0, n, 512):
        i = np.arange(start, min(n, start + 512))
        d = points[None, :, :] - points[i, None, :]
        dist = np.hypot(d[..., 0], d[..., 1])
        ok = (dist >= 2 * cfg.min_b) & (dist <= 2 * hi) & (np.arange(n)[None, :] > i[:, None])
        with np.errstate(invalid="ignore", divide="ignore"):
            ux, uy = d[..., 0] / dist, d[..., 1] / dist
            # |sin| between the two tangents, and between chord and tangent at i
            sin_tt = np.abs(ct[i, None] * st[None, :] - st[i, None] * ct[None, :])
            sin_ct = np.abs(ux * st[i, None] - uy * ct[i, None])
        ok &= (sin_tt <= par) & (sin_ct >= cfg.min_chord_sin)
        ii, jj = np.nonzero(ok)
        out_i.append(i[ii])
        out_j.append(jj)
    if not out_i:
        return np.zeros((0, 2), np.int64)
    return np.stack([np.concatenate(out_i), np.concatenate(out_j)], axis=1)


def _conjugate_to_axes(p: np.ndarray, q: np.ndarray) -> tuple[float, float, float]:
    """Semi-axes and orientation from a pair of conjugate semi-diameters."""
    u, sv, _ = np.linalg.svd(np.array([[p[0], q[0]], [p[1], q[1]]]))
    return float(sv[0]), float(sv[1]), math.atan2(u[1, 0], u[0, 0])


def _vote(points, p1, p2, tdir, cfg: "HoughConfig", min_votes: int):
    """Conjugate half-diameter accumulation for a batch of endpoint pairs.

    With centre ``c``, semi-diameter ``p`` and unit conjugate direction ``t``,
    a point ``r`` on the ellipse satisfies ``r - c = cos(s) p + sin(s) L t``;
    writing ``r - c = alpha p + beta t`` gives ``L = |beta| / sqrt(1 - alpha^2)``.
    """
    c = 0.5 * (p1 + p2)
    pv = 0.5 * (p2 - p1)
    det = pv[:, 0] * tdir[:, 1] - pv[:, 1] * tdir[:, 0]
    rx = points[None, :, 0] - c[:, 0, None]
    ry = points[None, :, 1] - c[:, 1, None]
    alpha = (rx * tdir[:, 1, None] - ry * tdir[:, 0, None]) / det[:, None]
    beta = (pv[:, 0, None] * ry - pv[:, 1, None] * rx) / det[:, None]
    s2 = 1.0 - alpha * alpha
    valid = s2 >= cfg.min_sin_tau**2
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(valid, np.abs(beta) / np.sqrt(np.where(valid, s2, 1.0)), -1.0)
    valid &= (lam >= cfg.min_b) & (lam <= 2 * np.hypot(pv[:, 0], pv[:, 1])[:, None] / cfg.min_ratio_prior)
    found = []
    for k in range(len(c)):
        lk = lam[k][valid[k]]
        if lk.size < min_votes:
            continue
        edges = np.arange(cfg.min_b, lk.max() + 2 * cfg.bin_width, cfg.bin_width)
        hist, _ = np.histogram(lk, bins=edges)
        # peak over a 3-bin window absorbs rasterisation jitter
        win = np.convolve(hist, np.ones(3, int), mode="same")
        pk = int(np.argmax(win))
        votes = int(win[pk])
        if votes < min_votes:
            continue
        centre = 0.5 * (edges[pk] + edges[pk + 1])
        near = lk[np.abs(lk - centre) <= 1.5 * cfg.bin_width]
        found.append((k, float(near.mean()), votes))
    return c, pv, found


def hough_candidates(points, config: HoughConfig = HoughConfig(), image_width: float | None = None) -> list[Ellipse]:
    """Randomized Hough ellipse candidates from boundary points ``(x, y)``.

    Endpoint pairs are drawn (seeded) among pairs that can span a diameter
    (parallel local tangents). The pair fixes the centre, one semi-diameter
    and the direction of its conjugate; every other point votes for the
    conjugate half-length in a 1-D accumulator. Pairs that are the major
    axis reduce to the classic major-axis/half-minor-axis scheme. Peaks with
    at least ``min_votes`` votes and a semi-major axis inside the configured
    bounds become candidates; after ``max_pairs`` draws the
    ``n_candidates`` best supported are returned in decreasing vote order.
    """
    pts = np.asarray(points, np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return []
    lo, hi = config.bounds(image_width, pts)
    min_votes = config.min_votes
    if min_votes is None:
        min_votes = max(3, int(math.ceil(config.min_votes_frac * len(pts))))
    tang = _tangent_angles(pts, config.tangent_radius)
    ok = ~np.isnan(tang)
    if ok.sum() < 3:
        return []
    idx_ok = np.flatnonzero(ok)
    pairs = _candidate_pairs(pts[ok], tang[ok], lo, hi, config)
    if len(pairs) == 0:
        return []
    pairs = idx_ok[pairs]
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))[: config.max_pairs]
    out: list[Ellipse] = []
    for start in range(0, len(order), config.batch):
        sel = pairs[order[start : start + config.batch]]
        p1, p2 = pts[sel[:, 0]], pts[sel[:, 1]]
        # conjugate direction: mean of the two (parallel) endpoint tangents
        t1, t2 = tang[sel[:, 0]], tang[sel[:, 1]]
        t2 = t1 + ((t2 - t1 + math.pi / 2) % math.pi - math.pi / 2)
        tm = 0.5 * (t1 + t2)
        tdir = np.stack([np.cos(tm), np.sin(tm)], axis=1)
        c, pv, found = _vote(pts, p1, p2, tdir, config, min_votes)
        for k, lam, votes in found:
            a, b, th = _conjugate_to_axes(pv[k], lam * tdir[k])
            if not (lo <= a <= hi) or b < config.min_b:
                continue
            out.append(Ellipse(c[k, 0], c[k, 1], a, b, th, votes=votes))
    # stable sort keeps draw order among equal votes
    out.sort(key=lambda e: -e.votes)
    return out[: config.n_candidates]


@dataclass
class FilterReport:
    n_input: int = 0
    rejected_ratio: int = 0
    rejected_overlap: int = 0
    n_kept: int = 0
    af_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "rejected_ratio": self.rejected_ratio,
            "rejected_overlap": self.rejected_overlap,
            "n_kept": self.n_kept,
        }


def filter_candidates(
    candidates: list[Ellipse],
    af_mask: np.ndarray,
    min_ratio: float = 0.6,
    overlap_cap: float = 0.2,
    inclusive: bool = True,
    interior_margin: float = 2.0,
    report: FilterReport | None = None,
) -> list[Ellipse]:
    """Keep plausible abdominal contours.

    Drops candidates with ``b/a`` below ``min_ratio`` and those whose
    interior (shrunk by ``interior_margin`` px) is more than ``overlap_cap``
    AF; of the rest keeps the half (rounded up) with the fewest AF pixels.
    """
    if not candidates:
        raise NoCandidateError("no ellipse candidates to filter")
    report = report if report is not None else FilterReport()
    report.n_input = len(candidates)
    af_mask = np.asarray(af_mask, bool)
    scored = []
    for e in candidates:
        ok = e.ratio >= min_ratio if inclusive else e.ratio > min_ratio
        if not ok:
            report.rejected_ratio += 1
            continue
        inside = ellipse_mask(e, af_mask.shape, shrink=interior_margin)
        area = int(inside.sum())
        count = int(np.count_nonzero(af_mask & inside))
        if area == 0 or count > overlap_cap * area:
            report.rejected_overlap += 1
            continue
        scored.append((count, e))
    if not scored:
        raise NoCandidateError("all ellipse candidates were filtered out")
    scored.sort(key=lambda t: t[0])  # stable: ties keep vote order
    keep = scored[: (len(scored) + 1) // 2]
    report.n_kept = len(keep)
    report.af_counts = [c for c, _ in keep]
    return [e for _, e in keep]


def _median(values) -> float:
    return float(np.median(np.asarray(values, float)))


def axial_distance(t1, t2) -> np.ndarray:
    """Distance between orientations on the circle of period pi."""
    d = np.abs(np.asarray(t1) - np.asarray(t2)) % math.pi
    return np.minimum(d, math.pi - d)


def circular_median_axial(thetas) -> float:
    """Median orientation of axial data, result in ``[0, pi)``.

    Minimises the summed axial distance over the sample orientations; when
    the minimum is attained on an arc between two samples (even counts) the
    arc's midpoint is returned.
    """
    t = np.asarray(thetas, float) % math.pi
    cost = axial_distance(t[:, None], t[None, :]).sum(axis=1)
    best = cost.min()
    tied = np.unique(t[np.isclose(cost, best, rtol=0, atol=1e-9)])
    if len(tied) == 1:
        return float(tied[0])
    # tied samples bound a flat arc; take the midpoint of the two extreme ones
    # along the shorter way around
    i, j = tied[0], tied[-1]
    diff = (j - i) % math.pi
    if diff > math.pi / 2:
        i, diff = j, math.pi - diff
    return float((i + diff / 2) % math.pi)


def median_ellipse(survivors: list[Ellipse]) -> Ellipse:
    if not survivors:
        raise NoCandidateError("median of an empty candidate set")
    return Ellipse(
        cx=_median([e.cx for e in survivors]),
        cy=_median([e.cy for e in survivors]),
        a=_median([e.a for e in survivors]),
        b=_median([e.b for e in survivors]),
        theta=circular_median_axial([e.theta for e in survivors]),
        votes=int(np.median([e.votes for e in survivors])),
    )


@dataclass
class ACMeasurement:
    """Final (adjusted) ellipse and its circumference."""

    ellipse: Ellipse
    ac_pixels: float
    ac_mm: float
    candidates_used: int
    raw_ellipse: Ellipse | None = None
    adjust: float = 1.0
    n_boundary: int = 0
    n_candidates: int = 0
    filter_report: FilterReport | None = None

    def to_dict(self) -> dict:
        d = {
            "ellipse": self.ellipse.to_dict(),
            "ac_pixels": self.ac_pixels,
            "ac_mm": self.ac_mm,
            "candidates_used": self.candidates_used,
            "n_candidates": self.n_candidates,
            "n_boundary": self.n_boundary,
            "adjust": self.adjust,
        }
        if self.raw_ellipse is not None:
            d["raw_ellipse"] = self.raw_ellipse.to_dict()
        if self.filter_report is not None:
            d["filter"] = self.filter_report.to_dict()
        return d


@dataclass(frozen=True)
class MeasureConfig:
    hough: HoughConfig = HoughConfig()
    min_ratio: float = 0.6
    ratio_inclusive: bool = True
    overlap_cap: float = 0.2
    min_component: int = 20
    adjust: float = 0.9


def fit_abdomen(label_map: np.ndarray, config: MeasureConfig = MeasureConfig()):
    """AF boundary -> Hough candidates -> filter -> median. Returns (ellipse, details)."""
    label_map = np.asarray(label_map)
    pts = af_boundary(label_map, config.min_component)
    if len(pts) == 0:
        raise EmptyRegionError("AF region vanished after speck removal")
    cands = hough_candidates(pts, config.hough, image_width=label_map.shape[1])
    report = FilterReport()
    surv = filter_candidates(
        cands, af_region(label_map, config.min_component), config.min_ratio,
        config.overlap_cap, config.ratio_inclusive, report=report,
    )
    return median_ellipse(surv), {"points": len(pts), "candidates": len(cands), "report": report, "survivors": surv}


def measure_ac(
    label_map: np.ndarray,
    pixel_spacing_mm: float = 1.0,
    adjust: float | None = None,
    config: MeasureConfig = MeasureConfig(),
) -> ACMeasurement:
    """Estimate the abdominal circumference from a semantic map.

    Both semi-axes of the median ellipse are multiplied by ``adjust``
    before the perimeter formula; ``ac_mm = ac_pixels * pixel_spacing_mm``.
    """
    adjust = config.adjust if adjust is None else adjust
    raw, info = fit_abdomen(label_map, config)
    final = raw.scaled(adjust)
    ac = final.perimeter()
    return ACMeasurement(
        ellipse=final,
        ac_pixels=ac,
        ac_mm=ac * pixel_spacing_mm,
        candidates_used=len(info["survivors"]),
        raw_ellipse=raw,
        adjust=adjust,
        n_boundary=info["points"],
        n_candidates=info["candidates"],
        filter_report=info["report"],
    )
