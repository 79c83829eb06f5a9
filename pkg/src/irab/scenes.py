"""Synthetic crowd scenes, ground-truth density maps and dataset files."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError

ROLES = ("labeled", "unlabeled", "test")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    count_range: tuple = (5, 40)
    cluster_range: tuple = (1, 3)
    blob_radius: float = 1.0
    noise: float = 0.04
    texture_scale: float = 3.0
    clutter_range: tuple = (0, 0)
    appearance_jitter: float = 0.0
    factor: int = 4

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(int(v) for v in self.count_range))
        object.__setattr__(self, "cluster_range", tuple(int(v) for v in self.cluster_range))
        object.__setattr__(self, "clutter_range", tuple(int(v) for v in self.clutter_range))
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"empty count range {self.count_range}")
        clo, chi = self.cluster_range
        if clo < 1 or chi < clo:
            raise ConfigError(f"empty cluster range {self.cluster_range}")
        if self.height % self.factor or self.width % self.factor:
            raise ConfigError(f"{self.height}x{self.width} not divisible by factor {self.factor}")
        if self.blob_radius <= 0 or self.noise < 0 or self.texture_scale <= 0:
            raise ConfigError("blob_radius and texture_scale must be > 0, noise >= 0")
        if self.clutter_range[0] < 0 or self.clutter_range[1] < self.clutter_range[0]:
            raise ConfigError(f"invalid clutter range {self.clutter_range}")
        if not 0 <= self.appearance_jitter < 1:
            raise ConfigError("appearance_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        d["cluster_range"] = list(self.cluster_range)
        d["clutter_range"] = list(self.clutter_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Scene:
    """Grayscale image in [0, 1] with dot annotations as (row, col) pixel coordinates.

    Pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``. ``box`` is set on crops
    and holds ``(top, left, height, width)`` in the parent image.
    """

    image: np.ndarray
    dots: np.ndarray
    seed: Optional[int] = None
    box: Optional[tuple] = None
    name: Optional[str] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return len(self.dots)


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    test: list = field(default_factory=list)
    spec: Optional[SceneSpec] = None

    def role(self, name: str) -> list:
        return getattr(self, name)


def _sample_dots(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    k = int(rng.integers(spec.cluster_range[0], spec.cluster_range[1] + 1))
    centers = rng.uniform((0, 0), (h, w), size=(k, 2))
    spreads = rng.uniform(0.06, 0.2, size=k) * min(h, w)
    which = rng.integers(0, k, size=n)
    dots = np.empty((n, 2))
    for i in range(n):
        c, s = centers[which[i]], spreads[which[i]]
        for _ in range(100):
            p = rng.normal(c, s)
            if 0 <= p[0] < h and 0 <= p[1] < w:
                break
        else:
            p = rng.uniform((0, 0), (h, w))
        dots[i] = p
    return dots


def _blob_layer(shape, dots: np.ndarray, radius: float) -> np.ndarray:
    rows = np.arange(shape[0])[:, None] + 0.5
    cols = np.arange(shape[1])[None, :] + 0.5
    out = np.zeros(shape)
    for r, c in dots:
        out += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * radius ** 2))
    return out


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    """Clustered dots drawn over a textured background with sensor noise.

    The background is a smooth random field plus ``clutter_range`` wide
    uncounted bumps. ``appearance_jitter`` scales per-scene variation of
    blob size, blob brightness and background contrast.
    """
    rng = np.random.default_rng(seed)
    dots = _sample_dots(rng, spec)
    shape = (spec.height, spec.width)
    j = spec.appearance_jitter
    tex = gaussian_filter(rng.normal(size=shape), spec.texture_scale, mode="wrap")
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
    level = rng.uniform(0.1, 0.3)
    contrast = 0.3 * rng.uniform(1 - j, 1 + j)
    radius = spec.blob_radius * rng.uniform(1 - j, 1 + j)
    bright = 0.45 * rng.uniform(1 - j, 1 + j)
    n_clutter = int(rng.integers(spec.clutter_range[0], spec.clutter_range[1] + 1))
    clutter = rng.uniform((0, 0), shape, size=(n_clutter, 2))
    clutter_radius = spec.blob_radius * rng.uniform(2.0, 3.5)
    image = (level + contrast * tex + bright * _blob_layer(shape, dots, radius)
             + bright * _blob_layer(shape, clutter, clutter_radius))
    image += rng.normal(0.0, spec.noise, size=shape)
    return Scene(np.clip(image, 0.0, 1.0), dots, seed=seed)


def generate_scenes(n: int, seed: int, spec: SceneSpec = SceneSpec()) -> list:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [generate_scene(int(s), spec) for s in seeds]


def render_density(scene: Scene, sigma: float = 1.5, factor: int = 4) -> np.ndarray:
    """Ground-truth density at image resolution divided by ``factor``.

    Each dot contributes a Gaussian with std ``sigma`` (label pixels),
    truncated to a ``2*ceil(3*sigma)+1`` window and to the map borders, then
    renormalised to unit mass, so the map sums to the dot count.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    h, w = scene.image.shape
    if h % factor or w % factor:
        raise ConfigError(f"image {h}x{w} not divisible by factor {factor}")
    hl, wl = h // factor, w // factor
    out = np.zeros((hl, wl))
    half = int(math.ceil(3 * sigma))
    for r, c in scene.dots:
        u, v = r / factor - 0.5, c / factor - 0.5
        ci = min(max(int(r // factor), 0), hl - 1)
        cj = min(max(int(c // factor), 0), wl - 1)
        r0, r1 = max(ci - half, 0), min(ci + half + 1, hl)
        c0, c1 = max(cj - half, 0), min(cj + half + 1, wl)
        rows = np.arange(r0, r1)[:, None]
        cols = np.arange(c0, c1)[None, :]
        k = np.exp(-((rows - u) ** 2 + (cols - v) ** 2) / (2 * sigma ** 2))
        out[r0:r1, c0:c1] += k / k.sum()
    return out


def split_dataset(scenes: Sequence[Scene], n_labeled: int, n_unlabeled: int, n_test: int,
                  seed: int) -> DatasetSplit:
    need = n_labeled + n_unlabeled + n_test
    if min(n_labeled, n_unlabeled, n_test) < 0 or need > len(scenes):
        raise DataError(f"cannot split {len(scenes)} scenes into {n_labeled}/{n_unlabeled}/{n_test}")
    order = np.random.default_rng(seed).permutation(len(scenes))
    pick = [scenes[i] for i in order]
    return DatasetSplit(pick[:n_labeled], pick[n_labeled:n_labeled + n_unlabeled],
                        pick[n_labeled + n_unlabeled:need])


def crop_pyramid(scene: Scene, levels: int, ratio: float, factor: int = 4, seed: int = 0) -> list:
    """Nested crops, largest (the full image) first.

    Every crop shrinks by ``ratio`` (rounded down to a multiple of ``factor``)
    and is placed as close to a common random anchor as containment in its
    parent allows.
    """
    if levels < 2:
        raise ConfigError("crop_pyramid needs at least 2 levels")
    if not 0 < ratio < 1:
        raise ConfigError("ratio must lie in (0, 1)")
    h, w = scene.image.shape
    sizes = [(h - h % factor, w - w % factor)]
    for _ in range(levels - 1):
        ph, pw = sizes[-1]
        nh = int(ph * ratio) // factor * factor
        nw = int(pw * ratio) // factor * factor
        if nh < 8 or nw < 8 or nh >= ph or nw >= pw:
            raise ConfigError(f"degenerate crop {nh}x{nw} from {ph}x{pw}")
        sizes.append((nh, nw))
    ar, ac = np.random.default_rng(seed).uniform((0, 0), (h, w))
    crops = []
    top = left = 0
    prev = sizes[0]
    for t, (ch, cw) in enumerate(sizes):
        if t:
            top += int(np.clip(round(ar - ch / 2) - top, 0, prev[0] - ch))
            left += int(np.clip(round(ac - cw / 2) - left, 0, prev[1] - cw))
        prev = (ch, cw)
        d = scene.dots
        inside = ((d[:, 0] >= top) & (d[:, 0] < top + ch) & (d[:, 1] >= left) & (d[:, 1] < left + cw))
        crops.append(Scene(scene.image[top:top + ch, left:left + cw].copy(),
                           d[inside] - (top, left), scene.seed, box=(top, left, ch, cw)))
    return crops


def photometric_augment(image: np.ndarray, seed: int, strength: float = 1.0) -> np.ndarray:
    """Brightness shift, contrast scaling about the mean and pixel noise."""
    if strength < 0:
        raise ConfigError("strength must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    shift = rng.uniform(-0.1, 0.1) * strength
    contrast = max(0.0, 1.0 + rng.uniform(-0.25, 0.25) * strength)
    noise = rng.normal(0.0, 0.03 * strength, size=image.shape)
    out = image * contrast + (1.0 - contrast) * image.mean() + shift + noise
    return np.clip(out, 0.0, 1.0)


# -- persistence --------------------------------------------------------------

def _write_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}")
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as e:
        raise DataError(f"{path}: cannot read image: {e}") from e


def write_dataset(split: DatasetSplit, directory, spec: Optional[SceneSpec] = None) -> Path:
    """Write ``<dir>/<role>/scene_%05d.{pgm,json}`` and ``split.json``."""
    root = Path(directory)
    spec = spec or split.spec
    manifest: dict = {"schema": 1}
    for role in ROLES:
        (root / role).mkdir(parents=True, exist_ok=True)
        names = []
        for i, sc in enumerate(split.role(role)):
            stem = f"{role}/scene_{i:05d}"
            _write_pgm(root / f"{stem}.pgm", sc.image)
            side = {"dots": sc.dots.tolist(), "seed": sc.seed,
                    "spec": spec.to_dict() if spec is not None else None}
            (root / f"{stem}.json").write_text(json.dumps(side, sort_keys=True), encoding="utf-8")
            names.append(f"{stem}.pgm")
        manifest[role] = names
    path = root / "split.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "split.json"
    if not path.is_file():
        raise DataError(f"no split manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed manifest: {e}") from e
    for role in ROLES:
        if not isinstance(manifest.get(role), list):
            raise DataError(f"{path}: manifest lacks a {role!r} list")
    return manifest


def manifest_checksum(directory) -> str:
    return hashlib.sha256((Path(directory) / "split.json").read_bytes()).hexdigest()


def read_scene(path, audit: Optional[list] = None) -> Scene:
    path = Path(path)
    side = path.with_suffix(".json")
    if audit is not None:
        audit.extend([str(path), str(side)])
    if not side.is_file():
        raise DataError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        dots = np.asarray(meta["dots"], dtype=np.float64).reshape(-1, 2)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataError(f"{side}: malformed sidecar: {e}") from e
    return Scene(_read_pgm(path), dots, seed=meta.get("seed"), name=path.stem)


def read_dataset(directory, roles: Sequence[str] = ROLES, audit: Optional[list] = None) -> DatasetSplit:
    """Load the requested roles only; files of other roles are never opened.

    Every opened path is appended to ``audit`` when given.
    """
    root = Path(directory)
    manifest = read_manifest(root)
    split = DatasetSplit()
    for role in roles:
        if role not in ROLES:
            raise DataError(f"unknown role {role!r}")
        setattr(split, role, [read_scene(root / name, audit) for name in manifest[role]])
    spec = None
    for role in roles:
        for name in manifest[role][:1]:
            side = json.loads((root / name).with_suffix(".json").read_text(encoding="utf-8"))
            if side.get("spec"):
                spec = SceneSpec.from_dict(side["spec"])
        if spec is not None:
            break
    split.spec = spec
    return split
