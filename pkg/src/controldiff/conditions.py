"""Synthetic scenes and the condition maps extracted from them.

A scene is 1-3 axis-aligned colored shapes (circle, square, triangle) on a
colored background, rasterized with antialiased signed-distance coverage.
Four local condition maps are computed from the rendered image: edge
(thresholded gradient magnitude), depth (normalized signed distance to the
nearest shape boundary), segmentation (one plane per shape kind), and sketch
(edge map with seeded jitter and gaps). The global condition is a fixed
random projection of a 4x4 grid of cell-mean colors, L2-normalized.

Shape colors come from the caption vocabulary; background colors do not, so
captions never describe the palette. Every color pair that can meet at an
edge is at least ~0.46 apart in RGB L2 distance, which the edge extractor's
threshold of 0.2 relies on.

Scenes are regenerated on demand from (dataset seed, index); nothing is
stored on disk except an optional manifest.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import DataConfig, DropoutPolicy
from .errors import ConfigurationError, ContractViolation, DomainError
from .text import COLOR_WORDS, KIND_WORDS, encode

# shape colors, keyed by caption word
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
}

# background palette, deliberately absent from the caption vocabulary and kept
# far (L2 >= ~0.46) from every shape color so edges stay detectable
BACKGROUND_COLORS = (
    (0.12, 0.12, 0.12),
    (0.85, 0.85, 0.85),
    (0.45, 0.30, 0.15),
    (0.15, 0.35, 0.20),
    (0.10, 0.25, 0.45),
    (0.50, 0.50, 0.25),
    (0.90, 0.60, 0.55),
    (0.20, 0.45, 0.50),
)

# fixed channel layout of the stacked local conditions
LOCAL_CONDITIONS = ("edge", "depth", "segmentation", "sketch")
CONDITION_CHANNELS = {"edge": 1, "depth": 1, "segmentation": 3, "sketch": 1}
LOCAL_CHANNELS = sum(CONDITION_CHANNELS.values())

EDGE_THRESHOLD = 0.2
MASK_THRESHOLD = 0.25
GLOBAL_GRID = 4
GLOBAL_DIM = 32
_GLOBAL_PROJECTION_SEED = 271828


def condition_slices():
    """Channel slice of each named condition inside the stacked map."""
    out, start = {}, 0
    for name in LOCAL_CONDITIONS:
        n = CONDITION_CHANNELS[name]
        out[name] = slice(start, start + n)
        start += n
    return out


_SLICES = condition_slices()


@dataclass(frozen=True)
class Shape:
    kind: str  # circle | square | triangle
    color: str  # caption color word
    center: tuple[float, float]  # (x, y) in pixels
    size: float  # half-extent in pixels

    def __post_init__(self):
        if self.kind not in KIND_WORDS:
            raise DomainError(f"unknown shape kind {self.kind!r}")
        if self.color not in COLOR_RGB:
            raise DomainError(f"unknown shape color {self.color!r}")
        if self.size <= 0:
            raise DomainError("shape size must be positive")


@dataclass(frozen=True)
class SyntheticScene:
    shapes: tuple[Shape, ...]
    background: tuple[float, float, float]
    caption: str
    sketch_seed: int = 0

    def validate(self, image_size):
        if not 1 <= len(self.shapes) <= 3:
            raise DomainError(f"scene must have 1-3 shapes, got {len(self.shapes)}")
        for s in self.shapes:
            x, y = s.center
            if not (s.size <= x <= image_size - s.size and s.size <= y <= image_size - s.size):
                raise DomainError(f"shape does not fit in a {image_size}px frame: {s}")
        return self


def _pixel_grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    return xs + 0.5, ys + 0.5


def shape_sdf(shape, xs, ys):
    """Signed distance to the shape boundary in pixels, negative inside."""
    cx, cy = shape.center
    r = shape.size
    if shape.kind == "circle":
        return np.hypot(xs - cx, ys - cy) - r
    if shape.kind == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) - r
    # upward triangle: apex on top, flat base below
    verts = np.array([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], dtype=np.float32)
    centroid = verts.mean(axis=0)
    sdf = np.full(xs.shape, -np.inf, dtype=np.float32)
    for i in range(3):
        a, b = verts[i], verts[(i + 1) % 3]
        normal = np.array([b[1] - a[1], a[0] - b[0]], dtype=np.float32)
        if np.dot(normal, centroid - a) > 0:
            normal = -normal
        normal /= np.hypot(*normal)
        d = (xs - a[0]) * normal[0] + (ys - a[1]) * normal[1]
        sdf = np.maximum(sdf, d)
    return sdf


def render_scene(scene, size):
    """Rasterize a scene to a float32 (3, H, W) image in [0, 1]."""
    xs, ys = _pixel_grid(size)
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(scene.background, dtype=np.float32)[:, None, None]
    for shape in scene.shapes:
        coverage = np.clip(0.5 - shape_sdf(shape, xs, ys), 0.0, 1.0)
        color = np.asarray(COLOR_RGB[shape.color], dtype=np.float32)[:, None, None]
        img = img * (1.0 - coverage) + color * coverage
    return img.astype(np.float32)


def _sobel_magnitude(image):
    # per-channel Sobel, L2 across channels, normalized so a unit color step
    # across one pixel has magnitude equal to its RGB distance
    total = np.zeros(image.shape[1:], dtype=np.float32)
    for ch in image:
        gx = ndimage.sobel(ch, axis=1, mode="nearest")
        gy = ndimage.sobel(ch, axis=0, mode="nearest")
        total += gx * gx + gy * gy
    return np.sqrt(total) / 4.0


def edge_condition(image):
    """Binary edge map from thresholded gradient magnitude."""
    return (_sobel_magnitude(image) > EDGE_THRESHOLD).astype(np.float32)


def _foreground_mask(image):
    # background = most frequent quantized color; foreground = far from it
    quantized = np.rint(np.asarray(image) * 255).astype(np.int32)
    flat = quantized[0] * 65536 + quantized[1] * 256 + quantized[2]
    values, counts = np.unique(flat, return_counts=True)
    code = values[np.argmax(counts)]
    bg = np.array([code // 65536, (code // 256) % 256, code % 256], dtype=np.float32) / 255.0
    dist = np.sqrt(((image - bg[:, None, None]) ** 2).sum(axis=0))
    return dist > MASK_THRESHOLD


def depth_condition(image):
    """Normalized signed distance to the nearest shape boundary.

    0.5 on the boundary, below 0.5 inside shapes (near), above outside (far),
    saturating at a quarter of the image size.
    """
    mask = _foreground_mask(image)
    size = image.shape[-1]
    if mask.any() and not mask.all():
        signed = ndimage.distance_transform_edt(~mask) - ndimage.distance_transform_edt(mask)
    else:
        signed = np.full(mask.shape, np.inf if not mask.any() else -np.inf)
    scale = 2.0 * (size / 4.0)
    return np.clip(0.5 + signed / scale, 0.0, 1.0).astype(np.float32)


def _fit_template(kind, ys, xs):
    # fit the candidate shape to the component's centroid and area, which
    # keeps sub-pixel alignment that a bounding-box fit loses on small masks
    area = float(len(ys))
    mx, my = xs.mean() + 0.5, ys.mean() + 0.5
    if kind == "circle":
        size, center = np.sqrt(area / np.pi), (mx, my)
    elif kind == "square":
        size, center = np.sqrt(area) / 2.0, (mx, my)
    else:  # triangle area = 2 r^2, centroid sits r/3 below the shape center
        size = np.sqrt(area / 2.0)
        size, center = size, (mx, my - size / 3.0)
    return Shape(kind=kind, color="red", center=center, size=size)


def segmentation_condition(image):
    """Per-shape-kind label planes (circle, square, triangle), one-hot per pixel.

    Each connected foreground component is classified by IoU against ideal
    circle/square/triangle masks fitted to its centroid and area. Only
    meaningful for the axis-aligned shapes this module renders.
    """
    mask = _foreground_mask(image)
    planes = np.zeros((3, *mask.shape), dtype=np.float32)
    labels, count = ndimage.label(mask)
    xs_grid, ys_grid = _pixel_grid(mask.shape[0])
    for idx in range(1, count + 1):
        component = labels == idx
        ys, xs = np.nonzero(component)
        best_kind, best_iou = None, -1.0
        for k, kind in enumerate(KIND_WORDS):
            template = shape_sdf(_fit_template(kind, ys, xs), xs_grid, ys_grid) < 0
            iou = np.logical_and(component, template).sum() / max(
                np.logical_or(component, template).sum(), 1
            )
            if iou > best_iou:
                best_kind, best_iou = k, iou
        planes[best_kind][component] = 1.0
    return planes


def sketch_condition(image, seed=0):
    """Edge map degraded by seeded gap dropout and 1px jitter."""
    edges = edge_condition(image)
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(edges)
    keep = rng.random(len(ys)) > 0.3
    jitter = rng.integers(-1, 2, size=(len(ys), 2))
    out = np.zeros_like(edges)
    size = edges.shape[0]
    ny = np.clip(ys[keep] + jitter[keep, 0], 0, size - 1)
    nx = np.clip(xs[keep] + jitter[keep, 1], 0, size - 1)
    out[ny, nx] = 1.0
    return out


_global_projection_cache = {}

# descriptor centering constant; without it every descriptor shares the
# all-positive background direction and unrelated scenes look similar
_GLOBAL_CENTER = np.mean(BACKGROUND_COLORS, axis=0).astype(np.float32)


def _global_projection():
    key = (GLOBAL_GRID, GLOBAL_DIM)
    if key not in _global_projection_cache:
        rng = np.random.default_rng(_GLOBAL_PROJECTION_SEED)
        n_in = 3 * GLOBAL_GRID * GLOBAL_GRID
        _global_projection_cache[key] = (
            rng.standard_normal((GLOBAL_DIM, n_in)).astype(np.float32) / np.sqrt(n_in)
        )
    return _global_projection_cache[key]


def global_condition(image):
    """Unit-norm 32-dim palette descriptor: centered cell-mean colors under a fixed random projection."""
    size = image.shape[-1]
    if size % GLOBAL_GRID:
        raise DomainError(f"image size {size} not divisible by grid {GLOBAL_GRID}")
    cell = size // GLOBAL_GRID
    means = image.reshape(3, GLOBAL_GRID, cell, GLOBAL_GRID, cell).mean(axis=(2, 4))
    centered = means - _GLOBAL_CENTER[:, None, None]
    vec = _global_projection() @ centered.reshape(-1)
    norm = np.linalg.norm(vec)
    if norm < 1e-6:  # degenerate palette: don't normalize rounding noise
        return np.zeros(GLOBAL_DIM, dtype=np.float32)
    return (vec / norm).astype(np.float32)


@dataclass
class ConditionSet:
    """Stacked local condition maps plus the global embedding, with presence flags."""

    local: np.ndarray  # (LOCAL_CHANNELS, H, W) float32
    local_present: np.ndarray  # (len(LOCAL_CONDITIONS),) bool
    global_embed: np.ndarray  # (GLOBAL_DIM,) float32
    global_present: bool

    @classmethod
    def zeros(cls, image_size):
        return cls(
            local=np.zeros((LOCAL_CHANNELS, image_size, image_size), dtype=np.float32),
            local_present=np.zeros(len(LOCAL_CONDITIONS), dtype=bool),
            global_embed=np.zeros(GLOBAL_DIM, dtype=np.float32),
            global_present=False,
        )

    def copy(self):
        return ConditionSet(
            local=self.local.copy(),
            local_present=self.local_present.copy(),
            global_embed=self.global_embed.copy(),
            global_present=self.global_present,
        )

    def map_for(self, name):
        return self.local[_SLICES[name]]


def extract_conditions(image, sketch_seed=0):
    """All condition maps for one image, all marked present."""
    local = np.zeros((LOCAL_CHANNELS, *image.shape[1:]), dtype=np.float32)
    local[_SLICES["edge"]] = edge_condition(image)[None]
    local[_SLICES["depth"]] = depth_condition(image)[None]
    local[_SLICES["segmentation"]] = segmentation_condition(image)
    local[_SLICES["sketch"]] = sketch_condition(image, seed=sketch_seed)[None]
    return ConditionSet(
        local=local,
        local_present=np.ones(len(LOCAL_CONDITIONS), dtype=bool),
        global_embed=global_condition(image),
        global_present=True,
    )


def apply_dropout(conditions, policy, rng):
    """Randomly zero out conditions: keep-all / drop-all / independent per-condition."""
    if not isinstance(policy, DropoutPolicy):
        raise ConfigurationError(f"expected DropoutPolicy, got {type(policy).__name__}")
    out = conditions.copy()
    u = rng.random()
    if u < policy.p_keep_all:
        return out
    drop_all = u < policy.p_keep_all + policy.p_drop_all
    for i, name in enumerate(LOCAL_CONDITIONS):
        if drop_all or rng.random() < policy.p_drop_each:
            out.local[_SLICES[name]] = 0.0
            out.local_present[i] = False
    if drop_all or rng.random() < policy.p_drop_each:
        out.global_embed[:] = 0.0
        out.global_present = False
    return out


# ---------------------------------------------------------------------------
# scene generation


def _relation(a, b):
    dx, dy = b.center[0] - a.center[0], b.center[1] - a.center[1]
    if abs(dx) >= abs(dy):
        return "left-of" if dx > 0 else "right-of"
    return "above" if dy > 0 else "below"


def _caption(shapes):
    words = []
    for i, s in enumerate(shapes):
        if i:
            words.append(_relation(shapes[i - 1], s))
        words.extend([s.color, s.kind])
    return " ".join(words)


def scene_for_index(seed, index, image_size):
    """Deterministically generate scene number `index` of the dataset stream `seed`."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    n_shapes = int(rng.integers(1, 4))
    background = BACKGROUND_COLORS[int(rng.integers(len(BACKGROUND_COLORS)))]
    colors = rng.choice(len(COLOR_WORDS), size=n_shapes, replace=False)
    shapes = []
    for i in range(n_shapes):
        kind = KIND_WORDS[int(rng.integers(len(KIND_WORDS)))]
        size = float(rng.uniform(0.10, 0.18) * image_size)
        placed = None
        for _ in range(40):
            lo, hi = size + 2.0, image_size - size - 2.0
            cx, cy = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
            clear = all(
                max(abs(cx - s.center[0]), abs(cy - s.center[1])) >= size + s.size + 2.0
                for s in shapes
            )
            if clear:
                placed = Shape(kind=kind, color=COLOR_WORDS[colors[i]], center=(cx, cy), size=size)
                break
        if placed is None:
            break  # frame is full; keep the shapes placed so far
        shapes.append(placed)
    sketch_seed = int(rng.integers(2**31))
    scene = SyntheticScene(
        shapes=tuple(shapes),
        background=background,
        caption=_caption(shapes),
        sketch_seed=sketch_seed,
    )
    return scene.validate(image_size)


class SceneDataset:
    """Deterministic, index-addressable synthetic dataset.

    Indices [0, num_scenes) are the training split; the held-out split lives
    at [num_scenes, num_scenes + heldout_scenes). Everything is recomputed
    from (seed, index) on access, so the dataset is order-independent and
    needs no storage.
    """

    def __init__(self, data_config=None, image_size=32):
        self.config = data_config or DataConfig()
        self.image_size = image_size

    def __len__(self):
        return self.config.num_scenes

    @property
    def train_indices(self):
        return range(self.config.num_scenes)

    @property
    def heldout_indices(self):
        return range(self.config.num_scenes, self.config.num_scenes + self.config.heldout_scenes)

    def scene(self, index):
        if index < 0:
            raise DomainError("scene index must be non-negative")
        return scene_for_index(self.config.seed, index, self.image_size)

    def sample(self, index):
        """(image, token_ids, conditions) for one scene, all conditions present."""
        scene = self.scene(index)
        image = render_scene(scene, self.image_size)
        token_ids = np.asarray(encode(scene.caption), dtype=np.int64)
        conditions = extract_conditions(image, sketch_seed=scene.sketch_seed)
        return image, token_ids, conditions

    def manifest(self, policy=None):
        return {
            "seed": self.config.seed,
            "num_scenes": self.config.num_scenes,
            "heldout_scenes": self.config.heldout_scenes,
            "image_size": self.image_size,
            "conditions": list(LOCAL_CONDITIONS) + ["global"],
            "channels": dict(CONDITION_CHANNELS),
            "dropout": dataclasses.asdict(policy) if policy else None,
        }

    def write_manifest(self, path, policy=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(policy), indent=2) + "\n")
        return path
