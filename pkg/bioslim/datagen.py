"""Deterministic synthetic phantoms for the denoise, labelfree, semantic and instance tasks."""

import enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage

from bioslim.config import logger
from bioslim.errors import PlacementFailure
from bioslim.tensor import Tensor, load_tensor, save_tensor
from bioslim.utils import read_json, write_json

PLACEMENT_ATTEMPTS = 1000
SPEC_FILE = "spec.json"

Pair = Tuple[Tensor, Tensor]


class Task(str, enum.Enum):
    DENOISE3D = "denoise3d"
    LABELFREE3D = "labelfree3d"
    SEMANTIC3D = "semantic3d"
    INSTANCE2D = "instance2d"


DEFAULT_SHAPES = {
    Task.DENOISE3D: [1, 1, 32, 64, 64],
    Task.LABELFREE3D: [1, 1, 32, 64, 64],
    Task.SEMANTIC3D: [1, 1, 32, 64, 64],
    Task.INSTANCE2D: [1, 1, 256, 256],
}
DEFAULT_COUNTS = {
    Task.DENOISE3D: (32, 48),
    Task.LABELFREE3D: (0, 0),
    Task.SEMANTIC3D: (4, 8),
    Task.INSTANCE2D: (8, 16),
}


class PhantomSpec(BaseModel):
    task: Task
    shape: Optional[List[int]] = None
    count_min: Optional[int] = Field(default=None, ge=0)
    count_max: Optional[int] = Field(default=None, ge=0)
    amplitude: float = Field(default=1.0, gt=0)
    noise_sigma: float = Field(default=0.3, ge=0)
    blob_sigma: Tuple[float, float] = (5.0, 7.0)
    radius: Tuple[float, float] = (6.0, 14.0)
    smooth_sigma: float = Field(default=1.0, ge=0)
    band: Tuple[float, float] = (1.0, 2.0)
    gain: float = Field(default=2.0, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _fill_defaults(self):
        if self.shape is None:
            self.shape = list(DEFAULT_SHAPES[self.task])
        low, high = DEFAULT_COUNTS[self.task]
        if self.count_min is None:
            self.count_min = low
        if self.count_max is None:
            self.count_max = max(high, self.count_min)
        if self.count_min > self.count_max:
            raise ValueError("count_min must not exceed count_max")
        if len(self.shape) not in (4, 5) or self.shape[:2] != [1, 1] or min(self.shape) < 1:
            raise ValueError(f"phantom shape must be [1, 1, *spatial] with 2 or 3 spatial axes, got {self.shape}")
        if self.task is Task.INSTANCE2D and len(self.shape) != 4:
            raise ValueError("instance2d phantoms are two-dimensional")
        for name in ("blob_sigma", "radius", "band"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        return self

    @property
    def spatial(self) -> Tuple[int, ...]:
        return tuple(self.shape[2:])

    def with_seed(self, seed: int) -> "PhantomSpec":
        return self.model_copy(update={"seed": seed})


def _tensor(spatial: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(spatial[None, None].astype(dtype))


def _count(spec: PhantomSpec, rng: np.random.Generator) -> int:
    return int(rng.integers(spec.count_min, spec.count_max + 1))


def _blobs(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    grid = np.indices(spec.spatial, dtype=np.float64)
    field = np.zeros(spec.spatial, dtype=np.float64)
    for _ in range(_count(spec, rng)):
        center = rng.uniform(0, spec.spatial)
        sigma = rng.uniform(*spec.blob_sigma)
        r2 = sum((axis - c) ** 2 for axis, c in zip(grid, center))
        field += spec.amplitude * np.exp(-r2 / (2 * sigma * sigma))
    return field


def _noise(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.noise_sigma == 0:
        return np.zeros(spec.spatial)
    return rng.normal(0.0, spec.noise_sigma, spec.spatial)


def gen_denoise(spec: PhantomSpec) -> Pair:
    rng = np.random.default_rng(spec.seed)
    clean = _blobs(spec, rng)
    noisy = clean + _noise(spec, rng)
    return _tensor(noisy), _tensor(clean)


def _ellipse(spec: PhantomSpec, rng: np.random.Generator, grid) -> np.ndarray:
    h, w = spec.spatial
    a, b = rng.uniform(*spec.radius, size=2)
    theta = rng.uniform(0, np.pi)
    cy = rng.uniform(1 + max(a, b), h - 2 - max(a, b)) if h > 3 + 2 * max(a, b) else (h - 1) / 2
    cx = rng.uniform(1 + max(a, b), w - 2 - max(a, b)) if w > 3 + 2 * max(a, b) else (w - 1) / 2
    yy, xx = grid[0] - cy, grid[1] - cx
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def gen_instances2d(spec: PhantomSpec) -> Pair:
    rng = np.random.default_rng(spec.seed)
    target = _count(spec, rng)
    grid = np.indices(spec.spatial, dtype=np.float64)
    labels = np.zeros(spec.spatial, dtype=np.int32)
    intensity = np.zeros(spec.spatial, dtype=np.float64)
    # keep one background pixel between objects and at the border
    interior = np.zeros(spec.spatial, dtype=bool)
    interior[1:-1, 1:-1] = True

    placed, attempts = 0, 0
    while placed < target:
        if attempts >= PLACEMENT_ATTEMPTS:
            raise PlacementFailure(f"placed {placed} of {target} objects in {PLACEMENT_ATTEMPTS} attempts")
        attempts += 1
        mask = _ellipse(spec, rng, grid)
        if not mask.any() or np.any(mask & ~interior):
            continue
        if np.any(labels[ndimage.binary_dilation(mask)] != 0):
            continue
        placed += 1
        labels[mask] = placed
        intensity[mask] = rng.uniform(0.6, 1.0) * spec.amplitude

    image = ndimage.gaussian_filter(intensity, spec.smooth_sigma) if spec.smooth_sigma > 0 else intensity
    image = image + _noise(spec, rng)
    logger.debug("instance phantom", objects=placed, attempts=attempts, seed=spec.seed)
    return _tensor(image), Tensor(labels[None, None])


def gen_semantic3d(spec: PhantomSpec) -> Pair:
    rng = np.random.default_rng(spec.seed)
    field = _blobs(spec, rng)
    mask = (field > 0.5 * spec.amplitude).astype(np.float32)
    image = field + _noise(spec, rng)
    return _tensor(image), _tensor(mask)


def gen_labelfree(spec: PhantomSpec) -> Pair:
    rng = np.random.default_rng(spec.seed)
    texture = rng.normal(0.0, 1.0, spec.spatial)
    if spec.smooth_sigma > 0:
        texture = ndimage.gaussian_filter(texture, spec.smooth_sigma)
    texture = (texture - texture.mean()) / max(texture.std(), 1e-12)
    fine, coarse = spec.band
    band = ndimage.gaussian_filter(texture, fine) - ndimage.gaussian_filter(texture, coarse)
    band = band / max(band.std(), 1e-12)
    target = np.tanh(spec.gain * band)
    return _tensor(texture), _tensor(target)


GENERATORS = {
    Task.DENOISE3D: gen_denoise,
    Task.LABELFREE3D: gen_labelfree,
    Task.SEMANTIC3D: gen_semantic3d,
    Task.INSTANCE2D: gen_instances2d,
}


def generate(spec: PhantomSpec, count: int) -> List[Pair]:
    """Sample i uses seed spec.seed + i."""
    return [GENERATORS[spec.task](spec.with_seed(spec.seed + i)) for i in range(count)]


def write_dataset(out_dir, pairs: List[Pair], spec: PhantomSpec) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (x, y) in enumerate(pairs):
        save_tensor(out / f"sample_{i:03d}_input.ebt", x)
        save_tensor(out / f"sample_{i:03d}_target.ebt", y)
    write_json(out / SPEC_FILE, {"spec": spec.model_dump(mode="json"), "samples": len(pairs)})
    logger.info("✅ dataset written", out_dir=str(out), task=spec.task.value, samples=len(pairs))
    return out


def load_dataset(path) -> Tuple[List[Pair], Optional[PhantomSpec]]:
    root = Path(path)
    inputs = sorted(root.glob("sample_*_input.ebt"))
    if not inputs:
        raise FileNotFoundError(f"no samples under {root}")
    pairs = []
    for x_path in inputs:
        y_path = x_path.with_name(x_path.name.replace("_input.ebt", "_target.ebt"))
        pairs.append((load_tensor(x_path), load_tensor(y_path)))
    spec = None
    if (root / SPEC_FILE).is_file():
        spec = PhantomSpec.model_validate(read_json(root / SPEC_FILE)["spec"])
    return pairs, spec
