"""Inference-time delineation: collect termination points, filter, polygonize.

Runs M episodes per image with stratified edge starts, takes the patch
centers at termination as boundary point estimates, drops outliers by
distance from the point-cloud mean, sorts the survivors by angle about
their mean, and rasterizes the resulting polygon into the segmentation
mask. Rewards computed during these episodes are discarded; the shaping
centroid is a fixed placeholder (the image center), so no centroid
estimation happens at inference.
"""

from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, run_episode
from .geometry import rasterize_polygon
from .seeds import mix_seed


class NoBoundaryPointsError(RuntimeError):
    """Every episode truncated; nothing to delineate."""


class AllPointsRejectedError(RuntimeError):
    """The outlier filter removed every collected point."""


class InsufficientBoundaryPointsError(RuntimeError):
    """Fewer than three points survive; no polygon can be built."""


@dataclass
class BoundaryPointSet:
    raw_points: list       # all termination patch centers, collection order
    kept_points: list
    rejected_points: list


@dataclass(frozen=True)
class BoundaryConfig:
    episodes: int = 32           # M at inference
    outlier_radius: float | None = None  # None: half the larger image side
    min_points: int = 3


@dataclass
class SegmentationResult:
    mask: np.ndarray
    point_set: BoundaryPointSet
    polygon: np.ndarray
    episodes_run: int
    episodes_terminated: int


def scaled_outlier_radius(image_size: int, radius: float = 10.0,
                          reference_scale: float = 360.0) -> float:
    """The documented 10 px rejection radius, rescaled from the reference
    image size to `image_size`."""
    return radius * image_size / reference_scale


def collect_boundary_points(phantom_image: np.ndarray, policy, classifier,
                            episodes: int, env_config: EnvConfig, seed: int):
    """Termination centers of up to `episodes` stratified-start episodes.

    Noise masking accumulates across episodes exactly as in training, so
    repeated visits to an already-found spot cannot re-terminate there.
    Returns (points, episodes_terminated).
    """
    working = phantom_image.copy()
    center_placeholder = (phantom_image.shape[0] / 2.0,
                          phantom_image.shape[1] / 2.0)
    points = []
    for m in range(episodes):
        traj = run_episode(phantom_image, policy, classifier, env_config,
                           seed=mix_seed(seed, m), working_image=working,
                           centroid=center_placeholder, episode_index=m,
                           start_mode="stratified")
        if traj.terminated:
            points.append(traj.centers[-1])
    if not points:
        raise NoBoundaryPointsError(
            f"no episode terminated within {env_config.max_steps} steps")
    return points, len(points)


def reject_outliers(points, radius: float) -> BoundaryPointSet:
    """Single pass: drop points farther than `radius` from the mean of all
    raw points."""
    if len(points) == 0:
        raise ValueError("need at least one point")
    arr = np.asarray(points, dtype=np.float64)
    mean = arr.mean(axis=0)
    dist = np.hypot(arr[:, 0] - mean[0], arr[:, 1] - mean[1])
    kept = [tuple(p) for p, d in zip(points, dist) if d <= radius]
    rejected = [tuple(p) for p, d in zip(points, dist) if d > radius]
    if not kept:
        raise AllPointsRejectedError(
            f"all {len(points)} points lie beyond {radius} px of their mean")
    return BoundaryPointSet(raw_points=[tuple(p) for p in points],
                            kept_points=kept, rejected_points=rejected)


def build_polygon(points) -> np.ndarray:
    """Vertices sorted by angle about the point mean; ties broken by
    radius, then input order. Simple for star-convex point sets."""
    if len(points) < 3:
        raise InsufficientBoundaryPointsError(
            f"polygon needs at least 3 points, got {len(points)}")
    arr = np.asarray(points, dtype=np.float64)
    mean = arr.mean(axis=0)
    angles = np.arctan2(arr[:, 0] - mean[0], arr[:, 1] - mean[1])
    radii = np.hypot(arr[:, 0] - mean[0], arr[:, 1] - mean[1])
    order = np.lexsort((np.arange(len(arr)), radii, angles))
    return arr[order]


def rasterize(polygon, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill; pixel centers decide membership."""
    return rasterize_polygon(polygon, height, width)


def segment(phantom_image: np.ndarray, policy, classifier,
            env_config: EnvConfig, config: BoundaryConfig, seed: int
            ) -> np.ndarray:
    """Full delineation pipeline; returns the segmentation mask."""
    return segment_with_details(phantom_image, policy, classifier, env_config,
                                config, seed).mask


def segment_with_details(phantom_image: np.ndarray, policy, classifier,
                         env_config: EnvConfig, config: BoundaryConfig,
                         seed: int) -> SegmentationResult:
    h, w = phantom_image.shape
    points, terminated = collect_boundary_points(
        phantom_image, policy, classifier, config.episodes, env_config, seed)
    radius = config.outlier_radius
    if radius is None:
        radius = max(h, w) / 2.0
    point_set = reject_outliers(points, radius)
    if len(point_set.kept_points) < config.min_points:
        raise InsufficientBoundaryPointsError(
            f"insufficient boundary points: {len(point_set.kept_points)} "
            f"survived outlier rejection, need {config.min_points}")
    polygon = build_polygon(point_set.kept_points)
    mask = rasterize(polygon, h, w)
    return SegmentationResult(mask=mask, point_set=point_set, polygon=polygon,
                              episodes_run=config.episodes,
                              episodes_terminated=terminated)
