"""Deterministic two-domain toy detection data.

The general domain holds coarse shapes with a random texture per instance;
the vertical domain holds texture-specific fine-grained children (stripes /
dots) under a shifted, more saturated background, a blue object palette and
stronger pixel noise.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import Box
from .numerics import SeededRng

SHAPES = ("disk", "square", "triangle")
TEXTURES = ("solid", "stripes", "dots")
# "mixed" draws one of TEXTURES per instance
_TEXTURE_CHOICES = TEXTURES + ("mixed",)


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    texture: str = "solid"
    parent: str | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.texture not in _TEXTURE_CHOICES:
            raise ValueError(f"unknown texture {self.texture!r}")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    categories: tuple[CategorySpec, ...]
    bg_hue: float = 0.58
    bg_hue_jitter: float = 0.03
    bg_saturation: float = 0.35
    bg_value: float = 0.5
    palette: tuple[float, ...] = (0.0, 0.08, 0.15)
    obj_saturation: float = 0.75
    obj_value: float = 0.9
    noise: float = 0.02
    gain_range: tuple[float, float] = (0.6, 1.0)
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (18, 30)
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.categories:
            raise ValueError("a domain needs at least one category")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.bg_hue_jitter <= 0.5 or self.noise < 0:
            raise ValueError("style parameters out of range")
        smin, smax = self.size_range
        if not 4 <= smin <= smax < min(self.image_size) - 2:
            raise ValueError("size_range does not fit the image")
        g0, g1 = self.gain_range
        if not 0.0 < g0 <= g1 <= 1.0:
            raise ValueError("gain_range must lie in (0, 1]")

    @property
    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    def fine_to_coarse(self) -> dict[str, str] | None:
        mapping = {c.name: c.parent for c in self.categories if c.parent is not None}
        return mapping or None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["categories"] = tuple(CategorySpec(**c) for c in d["categories"])
        for key in ("palette", "gain_range", "objects_per_image", "size_range", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def general_domain(**overrides) -> DomainSpec:
    cats = tuple(CategorySpec(s, s, "mixed") for s in ("disk", "square", "triangle"))
    return DomainSpec("general", cats, **overrides)


def vertical_domain(**overrides) -> DomainSpec:
    cats = (
        CategorySpec("striped disk", "disk", "stripes", "disk"),
        CategorySpec("dotted disk", "disk", "dots", "disk"),
        CategorySpec("striped square", "square", "stripes", "square"),
        CategorySpec("dotted square", "square", "dots", "square"),
    )
    params = dict(bg_hue=0.40, bg_saturation=0.7, bg_value=0.45, noise=0.06,
                  palette=(0.55, 0.65, 0.75))
    params.update(overrides)
    return DomainSpec("vertical", cats, **params)


@dataclass
class Scene:
    image: np.ndarray
    annotations: list[tuple[int, Box]]
    instance_map: np.ndarray = field(repr=False)


def _shape_mask(shape: str, cx: float, cy: float, size: float, px: np.ndarray, py: np.ndarray):
    half = size / 2.0
    if shape == "disk":
        return (px - cx) ** 2 + (py - cy) ** 2 <= half**2
    if shape == "square":
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    top = cy - half
    rel = (py - top) / size
    return (rel >= 0) & (rel <= 1) & (np.abs(px - cx) <= rel * half)


def _texture_dark(texture: str, px: np.ndarray, py: np.ndarray, x0: float, y0: float):
    if texture == "stripes":
        return (np.floor(px - x0).astype(int) // 2) % 2 == 1
    if texture == "dots":
        u = np.floor(px - x0).astype(int) % 5
        v = np.floor(py - y0).astype(int) % 5
        return (u >= 2) & (u <= 3) & (v >= 2) & (v <= 3)
    return np.zeros(px.shape, dtype=bool)


def render_scene(spec: DomainSpec, rng: SeededRng) -> Scene:
    H, W = spec.image_size
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    hue = (spec.bg_hue + rng.uniform(-spec.bg_hue_jitter, spec.bg_hue_jitter)) % 1.0
    bg = np.array(colorsys.hsv_to_rgb(hue, spec.bg_saturation, spec.bg_value))
    img = np.broadcast_to(bg, (H, W, 3)).copy()
    inst = np.full((H, W), -1, dtype=int)
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    placed: list[tuple[float, float, float, float]] = []
    annotations: list[tuple[int, Box]] = []
    for _ in range(n_obj):
        for _attempt in range(100):
            size = float(rng.uniform(spec.size_range[0], spec.size_range[1]))
            half = size / 2
            cx = float(rng.uniform(half + 1, W - half - 1))
            cy = float(rng.uniform(half + 1, H - half - 1))
            rect = (cx - half - 1, cy - half - 1, cx + half + 1, cy + half + 1)
            if all(rect[2] <= r[0] or rect[0] >= r[2] or rect[3] <= r[1] or rect[1] >= r[3]
                   for r in placed):
                break
        else:
            continue
        cat = int(rng.integers(0, len(spec.categories)))
        cspec = spec.categories[cat]
        mask = _shape_mask(cspec.shape, cx, cy, size, px, py)
        if not mask.any():
            continue
        obj_hue = spec.palette[int(rng.integers(0, len(spec.palette)))]
        color = np.array(colorsys.hsv_to_rgb(obj_hue, spec.obj_saturation, spec.obj_value))
        texture = cspec.texture
        if texture == "mixed":
            texture = TEXTURES[int(rng.integers(0, len(TEXTURES)))]
        dark = _texture_dark(texture, px, py, cx - half, cy - half)
        img[mask] = color
        img[mask & dark] = color * 0.35
        idx = len(annotations)
        inst[mask] = idx
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = Box.from_corners(cols[0] / W, rows[0] / H, (cols[-1] + 1) / W, (rows[-1] + 1) / H)
        annotations.append((cat, box))
        placed.append(rect)
    gain = float(rng.uniform(*spec.gain_range))
    img = img * gain
    if spec.noise > 0:
        img = img + rng.normal((H, W, 3), 0.0, spec.noise)
    img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Scene(img, annotations, inst)


@dataclass
class Dataset:
    domain: str
    categories: list[str]
    fine_to_coarse: dict[str, str] | None
    images: np.ndarray
    annotations: list[tuple[np.ndarray, np.ndarray]]
    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.domain, self.categories, self.fine_to_coarse, self.images[idx],
                       [self.annotations[i] for i in idx], [self.ids[i] for i in idx])


def _scene_annotations(scene: Scene):
    labels = np.array([c for c, _ in scene.annotations], dtype=int)
    boxes = np.array([b.as_array() for _, b in scene.annotations]).reshape(-1, 4)
    return labels, boxes


def make_dataset(spec: DomainSpec, n: int, seed: int, split: str = "train") -> Dataset:
    """Render ``n`` scenes in memory; identical to what :func:`generate_dataset` writes."""
    if n < 1:
        raise ValueError("n must be at least 1")
    base = SeededRng(seed).child(spec.name).child(split)
    scenes = [render_scene(spec, base.child(f"scene{i}")) for i in range(n)]
    return Dataset(spec.name, spec.category_names, spec.fine_to_coarse(),
                   np.stack([s.image for s in scenes]),
                   [_scene_annotations(s) for s in scenes], list(range(n)))


def write_dataset(ds: Dataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    samples = []
    for sid, img, (labels, boxes) in zip(ds.ids, ds.images, ds.annotations):
        fname = f"img_{sid:05d}.f32"
        (out / fname).write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
        anns = [{"cat": int(c), "cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]),
                 "h": float(b[3])} for c, b in zip(labels, boxes)]
        samples.append({"id": int(sid), "file": fname, "annotations": anns})
    manifest = {
        "domain": ds.domain,
        "categories": list(ds.categories),
        "fine_to_coarse": ds.fine_to_coarse,
        "image_dims": list(ds.images.shape[1:]),
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def generate_dataset(spec: DomainSpec, n: int, seed: int, out_dir: str | Path,
                     split: str = "train") -> dict:
    return write_dataset(make_dataset(spec, n, seed, split), out_dir)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h, w, c = manifest["image_dims"]
    images, anns, ids = [], [], []
    for s in manifest["samples"]:
        raw = np.frombuffer((path / s["file"]).read_bytes(), dtype="<f4")
        if raw.size != h * w * c:
            raise ValueError(f"{s['file']}: expected {h * w * c} values, found {raw.size}")
        images.append(raw.reshape(h, w, c).astype(np.float64))
        labels = np.array([a["cat"] for a in s["annotations"]], dtype=int)
        boxes = np.array([[a["cx"], a["cy"], a["w"], a["h"]] for a in s["annotations"]],
                         dtype=np.float64).reshape(-1, 4)
        anns.append((labels, boxes))
        ids.append(int(s["id"]))
    return Dataset(manifest["domain"], manifest["categories"], manifest["fine_to_coarse"],
                   np.stack(images), anns, ids)


def background_hue(image: np.ndarray, instance_map: np.ndarray) -> float:
    """Hue of the mean background colour."""
    rgb = image[instance_map < 0].mean(axis=0)
    return colorsys.rgb_to_hsv(*rgb)[0]
