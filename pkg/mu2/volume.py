"""CT volume ingest: container IO, min-max normalisation, resampling into frames, noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import InvalidInputError
from .storage import write_bytes

logger = logging.getLogger(__name__)

# Little-endian header: three int32 dims (D, H, W) then three float64 spacings (mm).
_HEADER = np.dtype([("dims", "<i4", (3,)), ("spacing", "<f8", (3,))])
_VOXEL = np.dtype("<f4")


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidInputError(f"volume must be a non-empty D×H×W array, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidInputError(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)


@dataclass(frozen=True)
class FrameStack:
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise InvalidInputError(f"frame stack must be a non-empty T×K×H×W array, got shape {self.data.shape}")

    @property
    def frames(self) -> int:
        return int(self.data.shape[0])

    @property
    def slices_per_frame(self) -> int:
        return int(self.data.shape[1])

    def as_volume_array(self) -> np.ndarray:
        t, k, h, w = self.data.shape
        return self.data.reshape(t * k, h, w)


def read_volume(path: Path) -> Volume:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise InvalidInputError(f"volume file not found: {path}") from exc
    if len(raw) < _HEADER.itemsize:
        raise InvalidInputError(f"{path}: truncated volume header")
    header = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    dims = tuple(int(d) for d in header["dims"])
    if any(d < 1 for d in dims):
        raise InvalidInputError(f"{path}: invalid dims {dims}")
    expected = int(np.prod(dims)) * _VOXEL.itemsize
    body = raw[_HEADER.itemsize:]
    if len(body) != expected:
        raise InvalidInputError(f"{path}: expected {expected} voxel bytes for dims {dims}, found {len(body)}")
    voxels = np.frombuffer(body, dtype=_VOXEL).reshape(dims).astype(np.float64)
    return Volume(voxels=voxels, spacing=tuple(float(s) for s in header["spacing"]))


def write_volume(path: Path, volume: Volume) -> None:
    header = np.zeros(1, dtype=_HEADER)
    header["dims"] = volume.shape
    header["spacing"] = volume.spacing
    write_bytes(path, header.tobytes() + np.ascontiguousarray(volume.voxels, dtype=_VOXEL).tobytes())


def _require_finite(array: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(array)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidInputError(f"{what} has {int(bad.sum())} non-finite values (first at index {first})")


def min_max_normalize(volume: Volume) -> Volume:
    _require_finite(volume.voxels, "volume")
    lo = float(volume.voxels.min())
    hi = float(volume.voxels.max())
    if hi == lo:
        return Volume(voxels=np.zeros_like(volume.voxels, dtype=np.float64), spacing=volume.spacing)
    scaled = (volume.voxels.astype(np.float64) - lo) / (hi - lo)
    return Volume(voxels=scaled, spacing=volume.spacing)


def frame_volume(array: np.ndarray, slices_per_frame: int) -> FrameStack:
    """Split a D×H×W array into contiguous depth blocks of K slices."""
    depth = array.shape[0]
    if slices_per_frame < 1 or depth % slices_per_frame:
        raise InvalidInputError(
            f"depth {depth} cannot be partitioned into frames of {slices_per_frame} slices"
        )
    frames = depth // slices_per_frame
    return FrameStack(data=array.reshape(frames, slices_per_frame, *array.shape[1:]))


def _sample_positions(n_in: int, n_resized: int, n_out: int) -> np.ndarray:
    # Half-pixel sample centres on the resized grid, cropped to the centred n_out window.
    start = (n_resized - n_out) // 2
    index = np.arange(start, start + n_out, dtype=np.float64)
    return (index + 0.5) * (n_in / n_resized) - 0.5


def resample_and_frame(volume: Volume, target: Sequence[int]) -> FrameStack:
    """Trilinear resample to T·K slices and an aspect-preserving H′×W′ crop."""
    if len(target) != 4 or any(int(t) < 1 for t in target):
        raise InvalidInputError(f"target must be four positive ints (T, K, H, W), got {tuple(target)}")
    frames, slices, height, width = (int(t) for t in target)
    voxels = volume.voxels
    if voxels.min() < 0.0 or voxels.max() > 1.0:
        raise InvalidInputError("resample_and_frame expects a volume normalised to [0, 1]")

    d_in, h_in, w_in = volume.shape
    depth = frames * slices
    if (d_in, h_in, w_in) == (depth, height, width):
        return frame_volume(voxels.astype(np.float64, copy=True), slices)

    scale = max(height / h_in, width / w_in)
    h_resized = max(height, int(round(h_in * scale)))
    w_resized = max(width, int(round(w_in * scale)))
    if (h_resized, w_resized) != (height, width):
        logger.debug("center-cropping in-plane %dx%d -> %dx%d", h_resized, w_resized, height, width)

    zs = _sample_positions(d_in, depth, depth)
    ys = _sample_positions(h_in, h_resized, height)
    xs = _sample_positions(w_in, w_resized, width)
    grid = np.meshgrid(zs, ys, xs, indexing="ij")
    resampled = map_coordinates(
        voxels.astype(np.float64, copy=False),
        grid,
        output=np.float64,
        order=1,
        mode="nearest",
    )
    return frame_volume(resampled, slices)


def add_noise(stack: FrameStack, sigma: float, seed: int) -> FrameStack:
    if sigma < 0:
        raise InvalidInputError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return FrameStack(data=stack.data.copy())
    rng = np.random.default_rng(seed)
    return FrameStack(data=stack.data + rng.normal(0.0, sigma, size=stack.data.shape))


def prepare_frames(volume: Volume, target: Sequence[int], sigma: float = 0.0, seed: int = 0) -> FrameStack:
    stack = resample_and_frame(min_max_normalize(volume), target)
    return add_noise(stack, sigma, seed)


def synthetic_volume(
    shape: Sequence[int], seed: int, blobs: int = 4, spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> Volume:
    """Air background, a soft-tissue body ellipsoid and a few brighter ellipsoidal lesions, in HU."""
    if len(shape) != 3 or any(int(n) < 1 for n in shape):
        raise InvalidInputError(f"shape must be three positive ints (D, H, W), got {tuple(shape)}")
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, int(n)) for n in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    voxels = np.full(z.shape, -1000.0)
    voxels[(z / 1.1) ** 2 + (y / 0.85) ** 2 + (x / 0.9) ** 2 <= 1.0] = 40.0
    for _ in range(blobs):
        centre = rng.uniform(-0.5, 0.5, size=3)
        radii = rng.uniform(0.1, 0.3, size=3)
        inside = sum(((c - m) / r) ** 2 for c, m, r in zip((z, y, x), centre, radii)) <= 1.0
        voxels[inside] = rng.uniform(60.0, 300.0)
    voxels += rng.normal(0.0, 5.0, size=voxels.shape)
    return Volume(voxels=voxels, spacing=spacing)
