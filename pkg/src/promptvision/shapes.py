"""Synthetic shape-world renderer: anti-aliased colored shapes scattered
on a noisy background, with exact box annotations.

Each object is rasterized from an analytic mask evaluated on a
supersampled grid inside its placement box, so the annotated box bounds
the rendered mass by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SHAPE_NAMES = [
    "circle", "square", "triangle", "star", "cross", "diamond",
    "ring", "pentagon", "hexagon", "arrow", "heart", "moon",
]

COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange"]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.05),
}

SUPERSAMPLE = 4
MAX_PLACEMENT_RETRIES = 100
MAX_MUTUAL_OVERLAP = 0.70


def plural(word: str) -> str:
    if word.endswith(("s", "x", "z", "ch", "sh")):
        return word + "es"
    return word + "s"


def _polygon_mask(x, y, verts):
    """Even-odd ray-casting point-in-polygon, vectorized over x/y arrays."""
    inside = np.zeros_like(x, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = ((y1 > y) != (y2 > y)) & (
            x < (x2 - x1) * (y - y1) / (y2 - y1 + 1e-300) + x1
        )
        inside ^= crosses
    return inside


def _star_verts(points=5, inner=0.45):
    verts = []
    for k in range(points * 2):
        r = 1.0 if k % 2 == 0 else inner
        a = np.pi * k / points - np.pi / 2
        verts.append((r * np.cos(a), r * np.sin(a)))
    return verts


def _regular_verts(n, phase=-np.pi / 2):
    return [(np.cos(2 * np.pi * k / n + phase), np.sin(2 * np.pi * k / n + phase))
            for k in range(n)]


_ARROW_VERTS = [(-1.0, -0.30), (0.10, -0.30), (0.10, -0.70), (1.0, 0.0),
                (0.10, 0.70), (0.10, 0.30), (-1.0, 0.30)]


def shape_mask(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean mask of the shape in local coords x, y in [-1, 1] (y down)."""
    if name == "circle":
        return x * x + y * y <= 1.0
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 1.0
    if name == "triangle":
        return (y >= -1.0) & (y <= 1.0) & (np.abs(x) <= (y + 1.0) / 2.0)
    if name == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0
    if name == "cross":
        return ((np.abs(x) <= 0.34) | (np.abs(y) <= 0.34)) & \
            (np.maximum(np.abs(x), np.abs(y)) <= 1.0)
    if name == "ring":
        r2 = x * x + y * y
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if name == "star":
        return _polygon_mask(x, y, _star_verts())
    if name == "pentagon":
        return _polygon_mask(x, y, _regular_verts(5))
    if name == "hexagon":
        return _polygon_mask(x, y, _regular_verts(6))
    if name == "arrow":
        return _polygon_mask(x, y, _ARROW_VERTS)
    if name == "heart":
        # classic sextic heart, flipped to image coordinates
        yy = -y * 1.2 + 0.25
        xx = x * 1.2
        return (xx * xx + yy * yy - 1.0) ** 3 - xx * xx * yy ** 3 <= 0.0
    if name == "moon":
        return (x * x + y * y <= 1.0) & ((x - 0.55) ** 2 + y * y >= 0.72 ** 2)
    raise ValueError(f"unknown shape {name!r}")


@dataclass
class SceneObject:
    shape: str
    color: str
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h


@dataclass
class Scene:
    image_id: str
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    objects: list[SceneObject] = field(default_factory=list)


@dataclass
class ShapeWorldConfig:
    image_size: int = 64
    shapes: tuple = tuple(SHAPE_NAMES)
    colors: tuple = tuple(COLOR_NAMES)
    min_objects: int = 1
    max_objects: int = 5
    min_obj_px: int = 14
    max_obj_px: int = 26
    train_images: int = 200
    val_images: int = 0
    test_images: int = 50
    seed: int = 0

    def __post_init__(self):
        if len(self.shapes) < 12:
            raise ValueError(f"need at least 12 shape concepts, got {len(self.shapes)}")
        if len(self.colors) < 6:
            raise ValueError(f"need at least 6 colors, got {len(self.colors)}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not (1 <= self.min_objects <= self.max_objects <= 5):
            raise ValueError("objects per image must stay within 1..5")


def _overlap_frac(box_a, box_b):
    """Intersection area over the smaller box's area."""
    ax1, ay1 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax2, ay2 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx1, by1 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx2, by2 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    smaller = min(box_a[2] * box_a[3], box_b[2] * box_b[3])
    return inter / smaller if smaller > 0 else 0.0


def _render_object(pixels, obj: SceneObject, size: int):
    cx, cy, w, h = obj.box
    x1 = int(np.floor((cx - w / 2) * size))
    y1 = int(np.floor((cy - h / 2) * size))
    x2 = int(np.ceil((cx + w / 2) * size))
    y2 = int(np.ceil((cy + h / 2) * size))
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(size, x2), min(size, y2)
    if x2 <= x1 or y2 <= y1:
        return
    ss = SUPERSAMPLE
    px = (np.arange(x1 * ss, x2 * ss) + 0.5) / ss / size
    py = (np.arange(y1 * ss, y2 * ss) + 0.5) / ss / size
    gx, gy = np.meshgrid(px, py)
    lx = (gx - cx) / (w / 2)
    ly = (gy - cy) / (h / 2)
    mask = shape_mask(obj.shape, lx, ly) & (np.abs(lx) <= 1) & (np.abs(ly) <= 1)
    cov = mask.reshape(y2 - y1, ss, x2 - x1, ss).mean(axis=(1, 3))
    color = np.asarray(COLOR_RGB[obj.color])
    region = pixels[y1:y2, x1:x2]
    pixels[y1:y2, x1:x2] = region * (1 - cov[..., None]) + color * cov[..., None]


def render_scene(rng: np.random.Generator, config: ShapeWorldConfig, image_id: str) -> Scene:
    size = config.image_size
    base = rng.uniform(0.25, 0.45)
    pixels = np.clip(base + rng.normal(0.0, 0.02, size=(size, size, 3)), 0.0, 1.0)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[SceneObject] = []
    for _ in range(n_objects):
        shape = str(rng.choice(list(config.shapes)))
        color = str(rng.choice(list(config.colors)))
        placed = False
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            s = rng.uniform(config.min_obj_px, config.max_obj_px)
            w = s / size
            h = s / size
            cx = rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)
            cy = rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)
            box = (cx, cy, w, h)
            if all(_overlap_frac(box, o.box) <= MAX_MUTUAL_OVERLAP for o in objects):
                objects.append(SceneObject(shape=shape, color=color, box=box))
                placed = True
                break
        if not placed:
            log.warning("image %s: could not place %s after %d retries; skipping",
                        image_id, shape, MAX_PLACEMENT_RETRIES)
    if not objects:
        # a scene must have at least one object; force one at the center
        s = config.min_obj_px / size
        objects.append(SceneObject(shape=str(rng.choice(list(config.shapes))),
                                   color=str(rng.choice(list(config.colors))),
                                   box=(0.5, 0.5, s, s)))
    for obj in objects:
        _render_object(pixels, obj, size)
    return Scene(image_id=image_id, pixels=pixels, objects=objects)


def generate_scenes(config: ShapeWorldConfig, seed: int | None = None):
    """Deterministic scene pools: returns dict with train/val/test lists."""
    seed = config.seed if seed is None else seed
    pools = {}
    counts = {"train": config.train_images, "val": config.val_images,
              "test": config.test_images}
    for pool, count in counts.items():
        scenes = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _pool_tag(pool), i]))
            scenes.append(render_scene(rng, config, image_id=f"{pool}_{i:06d}"))
        pools[pool] = scenes
    return pools


def _pool_tag(pool: str) -> int:
    return {"train": 1, "val": 2, "test": 3}[pool]


def crop_to_canvas(pixels: np.ndarray, box, canvas_size: int, fill: float = 0.35):
    """Cut the box region out of `pixels` and paste it centered on a plain
    canvas at original scale (no resize)."""
    size = pixels.shape[0]
    cx, cy, w, h = box
    x1 = max(0, int(np.floor((cx - w / 2) * size)))
    y1 = max(0, int(np.floor((cy - h / 2) * size)))
    x2 = min(size, int(np.ceil((cx + w / 2) * size)))
    y2 = min(size, int(np.ceil((cy + h / 2) * size)))
    patch = pixels[y1:y2, x1:x2]
    canvas = np.full((canvas_size, canvas_size, 3), fill)
    ph, pw = patch.shape[:2]
    ph, pw = min(ph, canvas_size), min(pw, canvas_size)
    oy = (canvas_size - ph) // 2
    ox = (canvas_size - pw) // 2
    canvas[oy:oy + ph, ox:ox + pw] = patch[:ph, :pw]
    return canvas


def rendered_mass_inside_box(pixels_before, pixels_after, box, size):
    """Fraction of the rendered pixel-mass change lying inside `box`."""
    diff = np.abs(pixels_after - pixels_before).sum(axis=-1)
    total = diff.sum()
    if total == 0:
        return 1.0
    cx, cy, w, h = box
    x1 = int(np.floor((cx - w / 2) * size))
    y1 = int(np.floor((cy - h / 2) * size))
    x2 = int(np.ceil((cx + w / 2) * size))
    y2 = int(np.ceil((cy + h / 2) * size))
    inside = diff[max(0, y1):y2, max(0, x1):x2].sum()
    return float(inside / total)
