"""Planar rigid-body geometry: SE(2) poses, oriented boxes, rotated IoU,
greedy oriented NMS, the heading sin/cos+flip codec, and bilinear grid
sampling.

Everything here is deterministic, side-effect free math.  Angle wrapping
happens in exactly one place (:func:`normalize_angle`); every heading that
leaves this module is already in (-pi, pi].
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TWO_PI = 2.0 * math.pi
QUARTER_PI = 0.25 * math.pi
THREE_QUARTER_PI = 0.75 * math.pi

# polygon areas below this (m^2) are treated as degenerate
AREA_EPS = 1e-12


def normalize_angle(theta):
    """Wrap an angle (array or scalar) into (-pi, pi]."""
    r = np.mod(theta, TWO_PI)
    r = np.where(r > math.pi, r - TWO_PI, r)
    return float(r) if np.ndim(theta) == 0 else r


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading is normalized on construction."""
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center pose; length runs along the heading axis."""
    center: Pose2
    w: float
    l: float

    def __post_init__(self):
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "l", float(self.l))
        if self.w <= 0.0 or self.l <= 0.0:
            raise ValueError(f"box sides must be positive, got w={self.w} l={self.l}")

    @property
    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """4x2 array of corner coordinates in CCW order."""
        c, s = math.cos(self.center.theta), math.sin(self.center.theta)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        ex, ey = c * hl, s * hl          # half-extent along heading
        fx, fy = -s * hw, c * hw         # half-extent across heading
        cx, cy = self.center.x, self.center.y
        return np.array([
            [cx + ex + fx, cy + ey + fy],
            [cx - ex + fx, cy - ey + fy],
            [cx - ex - fx, cy - ey - fy],
            [cx + ex - fx, cy + ey - fy],
        ])


def box(x, y, theta, w, l) -> OrientedBox:
    return OrientedBox(Pose2(x, y, theta), w, l)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def to_local_frame(target: Pose2, other: Pose2) -> Pose2:
    """Express `other` in the frame centered on `target`, x-axis along its
    heading."""
    dx, dy = other.x - target.x, other.y - target.y
    c, s = math.cos(target.theta), math.sin(target.theta)
    return Pose2(c * dx + s * dy, -s * dx + c * dy, other.theta - target.theta)


def from_local_frame(target: Pose2, local: Pose2) -> Pose2:
    """Inverse of :func:`to_local_frame` (composition with target's pose)."""
    c, s = math.cos(target.theta), math.sin(target.theta)
    return Pose2(target.x + c * local.x - s * local.y,
                 target.y + s * local.x + c * local.y,
                 target.theta + local.theta)


def transform_box(g: Pose2, b: OrientedBox) -> OrientedBox:
    """Apply the rigid transform g to a box (used by invariance checks)."""
    return OrientedBox(from_local_frame(g, b.center), b.w, b.l)


# ---------------------------------------------------------------------------
# rotated IoU via convex clipping
# ---------------------------------------------------------------------------


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        px, py = inp[-1]
        p_in = ex * (py - ay) - ey * (px - ax) >= 0.0
        for qx, qy in inp:
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0.0
            if q_in != p_in:
                # segment crosses the clip edge; intersect
                dx, dy = qx - px, qy - py
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - py) - ey * (ax - px)) / denom
                    output.append((px + t * dx, py + t * dy))
            if q_in:
                output.append((qx, qy))
            px, py, p_in = qx, qy, q_in
    return np.array(output) if output else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _corners_cw_to_ccw(c: np.ndarray) -> np.ndarray:
    # corners() is CCW already; guard in case callers hand in their own
    area2 = 0.0
    for i in range(4):
        x0, y0 = c[i]
        x1, y1 = c[(i + 1) % 4]
        area2 += x0 * y1 - x1 * y0
    return c if area2 >= 0 else c[::-1]


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    ca, cb = a.corners(), b.corners()
    # cheap separating check on axis-aligned bounds
    if (ca[:, 0].max() < cb[:, 0].min() or cb[:, 0].max() < ca[:, 0].min() or
            ca[:, 1].max() < cb[:, 1].min() or cb[:, 1].max() < ca[:, 1].min()):
        return 0.0
    poly = _clip_polygon(_corners_cw_to_ccw(ca), _corners_cw_to_ccw(cb))
    return _polygon_area(poly)


def oriented_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two rotated rectangles, in [0, 1]."""
    if a.area < AREA_EPS or b.area < AREA_EPS:
        warnings.warn("degenerate box in oriented_iou, reporting 0", RuntimeWarning)
        return 0.0
    inter = intersection_area(a, b)
    if inter <= AREA_EPS:
        return 0.0
    union = a.area + b.area - inter
    if union <= AREA_EPS:
        return 0.0
    return min(inter / union, 1.0)


def boxes_collide(a: OrientedBox, b: OrientedBox, iou_thresh: float) -> bool:
    if not (0.0 <= iou_thresh < 1.0):
        raise ValueError(f"iou_thresh {iou_thresh} outside [0, 1)")
    return oriented_iou(a, b) > iou_thresh


def oriented_nms(dets, iou_thresh: float) -> list:
    """Greedy suppression by descending score.

    `dets` is a sequence of (OrientedBox, score).  Returns kept indices in
    pick order; ties break by (score desc, index asc), so the result is
    independent of input order up to that key.
    """
    scores = np.array([float(s) for _, s in dets])
    if scores.size and not np.all(np.isfinite(scores)):
        raise ValueError("non-finite detection score")
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        bi = dets[i][0]
        if all(oriented_iou(bi, dets[j][0]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# orientation codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrientationCode:
    sin2t: float
    cos2t: float
    flip_logit: float


def flip_class(theta) -> np.ndarray | int:
    """1 where theta mod pi lies in (pi/4, 3*pi/4], else 0."""
    m = np.mod(theta, math.pi)
    out = ((m > QUARTER_PI) & (m <= THREE_QUARTER_PI)).astype(np.int64)
    return int(out) if np.ndim(theta) == 0 else out


def encode_orientation(theta: float) -> tuple:
    """Heading -> (sin 2t, cos 2t, flip class)."""
    return math.sin(2.0 * theta), math.cos(2.0 * theta), flip_class(theta)


def decode_orientation_values(sin2t, cos2t, flip_logit):
    """Vectorized decode of (sin2t, cos2t, flip logit) to headings.

    base = atan2/2 lies in (-pi/2, pi/2].  When the predicted flip class
    disagrees with base's own class, base shifts by the quarter turn that
    flips its class while staying nearest; result is wrapped to (-pi, pi].
    """
    s2 = np.asarray(sin2t, dtype=np.float64)
    c2 = np.asarray(cos2t, dtype=np.float64)
    fl = np.asarray(flip_logit, dtype=np.float64)
    base = 0.5 * np.arctan2(s2, c2)
    member = flip_class(base).astype(bool)
    predicted = fl > 0.0
    correction = np.where(base <= 0.0, 0.5 * math.pi, -0.5 * math.pi)
    theta = np.where(member == predicted, base, base + correction)
    out = normalize_angle(theta)
    return float(out) if np.ndim(sin2t) == 0 and np.ndim(cos2t) == 0 else out


def decode_orientation(code: OrientationCode) -> float:
    return decode_orientation_values(code.sin2t, code.cos2t, code.flip_logit)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def bilinear_sample(grid, points) -> ad.Tensor:
    """Bilinearly interpolate grid features at world points.

    `grid` provides height/width/resolution/origin and a values tensor of
    shape (H, W, C) or (H*W, C); `points` is one (x, y) pair or an (n, 2)
    array.  Returns an (n, C) tensor, differentiable in the grid values.
    Points outside the grid are clamped onto it with a warning.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    h, w, res = grid.height, grid.width, grid.resolution
    ox, oy = grid.origin

    fx = (pts[:, 0] - ox) / res
    fy = (pts[:, 1] - oy) / res
    if np.any(fx < 0) or np.any(fx > w - 1) or np.any(fy < 0) or np.any(fy > h - 1):
        warnings.warn("sample point outside grid extent, clamping", RuntimeWarning)
        fx = np.clip(fx, 0.0, w - 1.0)
        fy = np.clip(fy, 0.0, h - 1.0)

    ix = np.minimum(fx.astype(np.intp), w - 2) if w > 1 else np.zeros(len(pts), np.intp)
    iy = np.minimum(fy.astype(np.intp), h - 2) if h > 1 else np.zeros(len(pts), np.intp)
    tx = fx - ix
    ty = fy - iy
    base = iy * w + ix
    right = 1 if w > 1 else 0
    down = w if h > 1 else 0
    idx = np.stack([base, base + right, base + down, base + down + right], axis=1)
    wts = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty),
                    (1 - tx) * ty, tx * ty], axis=1)

    values = grid.values
    if len(values.shape) == 3:
        values = ad.reshape(values, (h * w, values.shape[2]))
    del single  # a single point simply yields a one-row tensor
    return ad.gather_interp(values, idx, wts)
