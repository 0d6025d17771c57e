"""Latent traversals and grayscale image grids."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import DecoderParams, decode

SEPARATOR = 255


@dataclass(frozen=True)
class TraverseSpec:
    kind: str = "single_dim"  # or "random_direction"
    dim: int = 0
    n_points: int = 100
    range: tuple[float, float] = (-10.0, 10.0)
    radius: float = 10.0
    zero_dims: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("single_dim", "random_direction"):
            raise ValueError(f"unknown traverse kind {self.kind!r}")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not self.range[0] < self.range[1]:
            raise ValueError("range must satisfy lo < hi")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def tag(self) -> str:
        return f"{self.kind}_{self.dim if self.kind == 'single_dim' else self.seed}"


def traverse_codes(spec: TraverseSpec, n_z: int) -> np.ndarray:
    """[n_points, n_z] codes along one axis, or from the origin along a random ray."""
    bad = [j for j in spec.zero_dims if not 0 <= j < n_z]
    if bad:
        raise ValueError(f"zero_dims {bad} outside [0, {n_z})")
    codes = np.zeros((spec.n_points, n_z))
    if spec.kind == "single_dim":
        if not 0 <= spec.dim < n_z:
            raise ValueError(f"dim {spec.dim} outside [0, {n_z})")
        codes[:, spec.dim] = np.linspace(spec.range[0], spec.range[1], spec.n_points)
        return codes
    if len(set(spec.zero_dims)) >= n_z:
        raise ValueError("zero_dims cover every dimension; no direction left")
    rng = np.random.default_rng(spec.seed)
    direction = rng.standard_normal(n_z)
    direction[list(spec.zero_dims)] = 0.0
    direction /= np.linalg.norm(direction)
    steps = np.linspace(0.0, spec.radius, spec.n_points)
    return steps[:, None] * direction[None, :]


def quantize(p: np.ndarray) -> np.ndarray:
    """[0,1] -> uint8 with round-half-up of 255*p."""
    return np.floor(np.clip(p, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def grid_shape(n_tiles: int, cols: int | None = None) -> tuple[int, int]:
    cols = cols or math.ceil(math.sqrt(n_tiles))
    return math.ceil(n_tiles / cols), cols


def tile_images(images: np.ndarray, image_shape: tuple[int, int], rows: int, cols: int) -> np.ndarray:
    """Tile row-major with 1-pixel separators, including an outer border."""
    n = len(images)
    if rows * cols < n:
        raise ValueError(f"layout {rows}x{cols} too small for {n} tiles")
    h, w = image_shape
    out = np.full((rows * (h + 1) + 1, cols * (w + 1) + 1), SEPARATOR, dtype=np.uint8)
    tiles = quantize(images).reshape(n, h, w)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        out[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = tile
    return out


def render_grid(codes: np.ndarray, decoder: DecoderParams, rows: int, cols: int,
                image_shape: tuple[int, int] | None = None, output: str = "sigmoid") -> np.ndarray:
    """Decode each code to mean probabilities and tile the images."""
    probs = decode(np.asarray(codes, dtype=np.float64), decoder, output).probs.data
    if image_shape is None:
        side = math.isqrt(probs.shape[1])
        if side * side != probs.shape[1]:
            raise ValueError(f"{probs.shape[1]} pixels is not square; pass image_shape")
        image_shape = (side, side)
    return tile_images(probs, image_shape, rows, cols)


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not a P5 PGM with maxval 255")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def zero_top_active(activity, k: int) -> list[int]:
    """Indices of the k largest activities; ties go to the lower index."""
    act = np.asarray(activity, dtype=np.float64)
    if not 0 <= k <= len(act):
        raise ValueError(f"k={k} outside [0, {len(act)}]")
    order = np.lexsort((np.arange(len(act)), -act))
    return sorted(int(i) for i in order[:k])


def write_traverse(out_dir, spec: TraverseSpec, codes: np.ndarray, decoder: DecoderParams,
                   cols: int | None = None, image_shape=None, output: str = "sigmoid") -> Path:
    """Write ``traverse_<kind>_<dim|seed>.pgm`` plus an index JSON of tile codes."""
    out_dir = Path(out_dir)
    rows, cols = grid_shape(len(codes), cols)
    img = render_grid(codes, decoder, rows, cols, image_shape, output)
    pgm = write_pgm(out_dir / f"traverse_{spec.tag}.pgm", img)
    index = {
        "kind": spec.kind,
        "dim": spec.dim if spec.kind == "single_dim" else None,
        "seed": spec.seed,
        "zero_dims": list(spec.zero_dims),
        "rows": rows,
        "cols": cols,
        "tiles": [[round(float(v), 12) for v in row] for row in codes],
    }
    (out_dir / f"traverse_{spec.tag}.json").write_text(json.dumps(index) + "\n")
    return pgm
