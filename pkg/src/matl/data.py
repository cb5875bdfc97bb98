"""Tiles: synthetic aerial-style generation and an on-disk dataset format.

On-disk layout (``load_dataset`` / ``write_dataset``)::

    DIR/manifest.json      [{"image": "images/0000.png", "class": 0,
                             "box": [x, y, w, h], "mask": "masks/0000.png"}, ...]
    DIR/images/*.png       8-bit RGB (grayscale is replicated)
    DIR/masks/*.png        8-bit, nonzero = object (optional per sample)

Paths are relative to DIR. Boxes are pixel extents: columns [x, x+w), rows [y, y+h).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .boxlabels import BoxAnnotation
from .errors import ConfigError, CropError, UsageError, ValidationError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_KEYS = {"image", "class", "box", "mask"}


@dataclass
class Tile:
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    mask: np.ndarray  # (S, S) uint8 in {0, 1}
    box: BoxAnnotation
    class_label: int
    box_label: int | None = None
    ident: str = ""
    geometry: int | None = None  # generating geometry profile, synthetic tiles only


@dataclass(frozen=True)
class GeometryProfile:
    area: tuple[float, float]  # fraction of tile area
    aspect: tuple[float, float]  # long / short semi-axis


@dataclass(frozen=True)
class Appearance:
    color: tuple[float, float, float]
    texture: float


@dataclass(frozen=True)
class SyntheticProfile:
    """Box geometry profiles, per-class appearance, and class -> geometry mixing.

    Geometry 0 is small near-square, 1 large elongated, 2 small elongated;
    class ``c`` mostly draws geometry ``c`` but not always, so box types
    cut across classes.
    """

    geometries: tuple[GeometryProfile, ...] = (
        GeometryProfile(area=(0.060, 0.120), aspect=(1.0, 1.2)),
        GeometryProfile(area=(0.156, 0.240), aspect=(2.0, 2.6)),
        GeometryProfile(area=(0.060, 0.120), aspect=(2.2, 3.0)),
    )
    appearances: tuple[Appearance, ...] = (
        Appearance(color=(0.62, 0.45, 0.30), texture=0.06),
        Appearance(color=(0.50, 0.36, 0.26), texture=0.06),
        Appearance(color=(0.40, 0.38, 0.36), texture=0.06),
    )
    # row = class, column = geometry probability
    class_geometry: tuple[tuple[float, ...], ...] = (
        (0.80, 0.00, 0.20),
        (0.00, 0.85, 0.15),
        (0.20, 0.00, 0.80),
    )
    background: tuple[float, float, float] = (0.32, 0.42, 0.24)
    background_texture: float = 0.08
    color_jitter: float = 0.08
    max_rotation_deg: float = 15.0

    @property
    def num_classes(self) -> int:
        return len(self.appearances)


def tight_box(mask: np.ndarray) -> BoxAnnotation | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    return BoxAnnotation(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Min-Max over all pixels and channels jointly; a constant image maps to zeros."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise UsageError("normalize_image: empty image")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def normalize_dataset(images: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Min-Max with one (min, max) pair shared by every image."""
    lo = min(float(np.min(im)) for im in images)
    hi = max(float(np.max(im)) for im in images)
    if hi == lo:
        return [np.zeros(np.shape(im), dtype=np.float32) for im in images]
    return [((np.asarray(im, dtype=np.float64) - lo) / (hi - lo)).astype(np.float32) for im in images]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_crop(scene_image: np.ndarray, scene_mask: np.ndarray, scene_box: BoxAnnotation,
                tile_size: int, seed=None, class_label: int = 0, ident: str = "") -> Tile:
    """Cut a tile containing the whole box with at least 1 px margin.

    The offset is uniform over every position satisfying the margin and
    staying inside the scene.
    """
    sh, sw = scene_mask.shape
    bx, by, bw, bh = (int(v) for v in scene_box.as_list())
    if bw > tile_size - 2 or bh > tile_size - 2:
        raise CropError(f"object {bw}x{bh} does not fit a {tile_size}px tile with a 1px margin")
    if tile_size > sh or tile_size > sw:
        raise CropError(f"scene {sw}x{sh} smaller than tile {tile_size}")
    rng = _rng(seed)
    offsets = []
    for start, extent, scene in ((bx, bw, sw), (by, bh, sh)):
        lo = max(start + extent + 1 - tile_size, 0)
        hi = min(start - 1, scene - tile_size)
        if lo > hi:
            raise CropError("no crop offset keeps the object inside the tile and the tile inside the scene")
        offsets.append(int(rng.integers(lo, hi + 1)))
    ox, oy = offsets
    return Tile(
        image=np.ascontiguousarray(scene_image[oy:oy + tile_size, ox:ox + tile_size]),
        mask=np.ascontiguousarray(scene_mask[oy:oy + tile_size, ox:ox + tile_size]),
        box=BoxAnnotation(bx - ox, by - oy, bw, bh),
        class_label=class_label,
        ident=ident,
    )


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    img = Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return (u * u + v * v <= 1.0).astype(np.uint8)


def render_scene(class_label: int, geometry: int, tile_size: int, rng: np.random.Generator,
                 profile: SyntheticProfile) -> tuple[np.ndarray, np.ndarray, BoxAnnotation]:
    """Draw one rotated-ellipse object on a textured scene twice the tile side."""
    geo = profile.geometries[geometry]
    look = profile.appearances[class_label]
    size = 2 * tile_size
    area = rng.uniform(*geo.area) * tile_size ** 2
    aspect = rng.uniform(*geo.aspect)
    a = np.sqrt(area * aspect / np.pi)
    b = a / aspect
    if 2 * a > tile_size - 2:
        raise ConfigError(f"geometry {geometry}: object length {2 * a:.1f}px exceeds a {tile_size}px tile")
    theta = np.deg2rad(rng.uniform(-profile.max_rotation_deg, profile.max_rotation_deg))
    cx = rng.uniform(size / 2 - tile_size / 4, size / 2 + tile_size / 4)
    cy = rng.uniform(size / 2 - tile_size / 4, size / 2 + tile_size / 4)
    mask = _ellipse_mask(size, cx, cy, a, b, theta)

    bg = np.asarray(profile.background) + rng.normal(0, profile.color_jitter / 2, 3)
    img = np.empty((size, size, 3))
    for ch in range(3):
        img[..., ch] = bg[ch] + profile.background_texture * (
            _smooth_noise(rng, size, 8) + 0.5 * rng.normal(size=(size, size)))
    color = np.asarray(look.color) + rng.normal(0, profile.color_jitter, 3)
    shade = look.texture * rng.normal(size=(size, size))
    obj = color[None, None, :] + shade[..., None]
    img = np.where(mask[..., None].astype(bool), obj, img)
    box = tight_box(mask)
    if box is None:
        raise ConfigError(f"geometry {geometry} renders an empty object at {tile_size}px")
    return np.clip(img, 0.0, 1.0), mask, box


def generate_synthetic(n_per_class: int, tile_size: int = 64, seed: int = 0,
                       profile: SyntheticProfile | None = None) -> list[Tile]:
    """Tiles interleaved by class (0, 1, 2, 0, ...), deterministic in ``seed``."""
    if n_per_class < 1:
        raise UsageError(f"n_per_class must be >= 1, got {n_per_class}")
    profile = profile or SyntheticProfile()
    k = profile.num_classes
    tiles = []
    for i in range(n_per_class * k):
        cls = i % k
        rng = np.random.default_rng([seed, i])
        geometry = int(rng.choice(len(profile.geometries), p=profile.class_geometry[cls]))
        scene, mask, box = render_scene(cls, geometry, tile_size, rng, profile)
        tile = random_crop(scene, mask, box, tile_size, rng, class_label=cls, ident=f"{i:05d}")
        tile.image = normalize_image(tile.image)
        tile.geometry = geometry
        tiles.append(tile)
    return tiles


# ---------------------------------------------------------------------------
# on-disk datasets


def write_dataset(tiles: Sequence[Tile], directory) -> Path:
    out = Path(directory)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(tiles):
        name = t.ident or f"{i:05d}"
        img = np.clip(np.rint(t.image * 255), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(out / "images" / f"{name}.png")
        Image.fromarray((t.mask > 0).astype(np.uint8) * 255, mode="L").save(out / "masks" / f"{name}.png")
        entries.append({
            "image": f"images/{name}.png",
            "class": int(t.class_label),
            "box": [int(v) for v in t.box.as_list()],
            "mask": f"masks/{name}.png",
        })
    (out / MANIFEST).write_text(json.dumps(entries, indent=1) + "\n")
    return out


def _read_rgb(path: Path, where: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise ValidationError(f"{where}: cannot read image {path}: {exc}") from exc
    return arr


def load_dataset(directory, normalization: str = "per_image") -> list[Tile]:
    root = Path(directory)
    path = root / MANIFEST
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: top level must be an array of samples")
    if normalization not in ("per_image", "per_dataset"):
        raise ConfigError(f"normalization: expected per_image or per_dataset, got {normalization!r}")

    raw = []
    for i, e in enumerate(entries):
        where = f"{path} sample {i}"
        if not isinstance(e, dict) or not {"image", "class", "box"} <= e.keys():
            raise ValidationError(f"{where}: needs keys image, class, box")
        extra = set(e) - MANIFEST_KEYS
        if extra:
            raise ValidationError(f"{where}: unknown keys {sorted(extra)}")
        box_vals = e["box"]
        if not (isinstance(box_vals, list) and len(box_vals) == 4
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box_vals)):
            raise ValidationError(f"{where}: box must be [x, y, w, h] numbers")
        if not isinstance(e["class"], int) or isinstance(e["class"], bool) or e["class"] < 0:
            raise ValidationError(f"{where}: class must be a nonnegative integer")
        x, y, w, h = (int(v) for v in box_vals)
        if w <= 0 or h <= 0:
            raise ValidationError(f"{where}: box has nonpositive size w={w}, h={h}")
        img = _read_rgb(root / e["image"], where)
        ih, iw = img.shape[:2]
        if x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise ValidationError(f"{where}: box {box_vals} outside {iw}x{ih} image")
        box = BoxAnnotation(x, y, w, h)
        if e.get("mask"):
            try:
                with Image.open(root / e["mask"]) as im:
                    mask = (np.asarray(im.convert("L")) > 0).astype(np.uint8)
            except OSError as exc:
                raise ValidationError(f"{where}: cannot read mask: {exc}") from exc
            if mask.shape != (ih, iw):
                raise ValidationError(f"{where}: mask shape {mask.shape} != image shape {(ih, iw)}")
            if tight_box(mask) != box:
                raise ValidationError(f"{where}: box {box_vals} is not the tight box of the mask")
        else:
            mask = np.zeros((ih, iw), dtype=np.uint8)
            mask[y:y + h, x:x + w] = 1
        raw.append((img, mask, box, e["class"], f"{i:05d}"))

    images = [r[0] for r in raw]
    if normalization == "per_image":
        images = [normalize_image(im) for im in images]
    else:
        images = normalize_dataset(images)
    return [Tile(image=im, mask=m, box=b, class_label=c, ident=ident)
            for im, (_, m, b, c, ident) in zip(images, raw)]
