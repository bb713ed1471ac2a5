"""Synthetic ultrasound-like phantoms with exact ground truth.

Each phantom is a grayscale image containing a single star-convex bright
region on a darker background, multiplicative speckle noise, and an
optional dark shadow wedge strictly inside the region. The boundary
polygon is known analytically, the mask is its rasterization, and the
centroid is the mean of mask pixel coordinates, so every downstream
metric has an exact reference.

The background is not flat: a fixed radial luminance ramp (darkest at the
image corners, brightest at the center, always below the ROI intensity)
is shared by every phantom. Local patches therefore carry a weak position
cue pointing toward the image center, which a patch-observing controller
needs in order to navigate on images it never saw during training; the
focal brightening loosely mimics an ultrasound focal zone. Speckle and
region shape still vary per seed.
"""

import json
from dataclasses import dataclass

import numpy as np

from .geometry import rasterize_polygon
from .seeds import mix_seed

# Shared intensity model. The ROI sits `contrast` above the brightest
# background value so region pixels dominate regardless of position.
BG_BASE = 0.12
FOCAL_AMP = 0.16
SHADOW_SCALE = 0.3
POLYGON_VERTICES = 180


class PhantomConfigError(ValueError):
    """Raised for configurations whose ROI cannot fit in the image."""


class PGMFormatError(ValueError):
    """Raised for unreadable or inconsistent PGM files."""


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 96
    width: int = 96
    radius_mean: float = 28.0
    radius_jitter: float = 0.18
    n_harmonics: int = 4
    speckle_sigma: float = 0.12
    shadow_probability: float = 0.35
    shadow_max_fraction: float = 0.2
    contrast: float = 0.45
    seed: int = 0

    def validate(self) -> None:
        half = min(self.height, self.width) / 2.0
        if not (0.0 <= self.radius_jitter < 1.0):
            raise PhantomConfigError("radius_jitter must be in [0, 1)")
        if self.radius_mean * (1.0 + self.radius_jitter) >= half:
            raise PhantomConfigError(
                "ROI does not fit: radius_mean * (1 + radius_jitter) must be "
                f"< {half} for a {self.height}x{self.width} image"
            )
        if self.border_margin + self.radius_mean * (1.0 + self.radius_jitter) >= half:
            raise PhantomConfigError(
                "ROI cannot keep the border margin of "
                f"{self.border_margin} px; shrink radius_mean or radius_jitter"
            )
        if not (0.0 <= self.shadow_probability <= 1.0):
            raise PhantomConfigError("shadow_probability must be in [0, 1]")
        if not (0.0 <= self.shadow_max_fraction < 1.0):
            raise PhantomConfigError("shadow_max_fraction must be in [0, 1)")
        if not (0.0 <= self.contrast <= 1.0 - BG_BASE - FOCAL_AMP):
            raise PhantomConfigError(
                f"contrast must be in [0, {1.0 - BG_BASE - FOCAL_AMP}] so "
                "intensities stay in [0, 1]"
            )
        if self.speckle_sigma < 0:
            raise PhantomConfigError("speckle_sigma must be >= 0")

    @property
    def border_margin(self) -> int:
        # Keeps every mask pixel at least patch_size/2 from the border for
        # any patch size up to min(H, W)/4 (the documented size contract).
        return min(self.height, self.width) // 8

    @property
    def roi_intensity(self) -> float:
        return BG_BASE + FOCAL_AMP + self.contrast


@dataclass
class Phantom:
    image: np.ndarray          # (H, W) float64 in [0, 1]
    mask: np.ndarray           # (H, W) bool, rasterized gt_polygon
    gt_polygon: np.ndarray     # (K, 2) float64 (i, j) vertices
    centroid: tuple            # (i, j) mean of mask pixel coordinates


def background_field(height: int, width: int) -> np.ndarray:
    """Deterministic background: focal ramp, brightest at the center."""
    pi = np.linspace(-1.0, 1.0, height)[:, None]
    pj = np.linspace(-1.0, 1.0, width)[None, :]
    return BG_BASE + FOCAL_AMP * (1.0 - (pi ** 2 + pj ** 2) / 2.0)


def _boundary_radius(theta, radius_mean, amplitudes, phases):
    r = np.ones_like(theta)
    for h, (a, phi) in enumerate(zip(amplitudes, phases), start=1):
        r += a * np.cos(h * theta + phi)
    return radius_mean * r


def generate_phantom(config: PhantomConfig, seed: int | None = None) -> Phantom:
    """Generate one phantom, deterministic in (config, seed).

    seed defaults to config.seed. The ROI boundary is a radial harmonic
    curve (star-convex by construction), the mask is its rasterization,
    and the shadow wedge (if drawn) lies strictly inside the mask.
    """
    config.validate()
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width

    njit = config.radius_jitter / max(1, config.n_harmonics)
    amplitudes = rng.uniform(-njit, njit, config.n_harmonics)
    phases = rng.uniform(0.0, 2.0 * np.pi, config.n_harmonics)

    r_max = config.radius_mean * (1.0 + config.radius_jitter)
    slack_i = int(h / 2.0 - config.border_margin - r_max)
    slack_j = int(w / 2.0 - config.border_margin - r_max)
    center = (
        h / 2.0 + rng.integers(-slack_i, slack_i + 1) if slack_i > 0 else h / 2.0,
        w / 2.0 + rng.integers(-slack_j, slack_j + 1) if slack_j > 0 else w / 2.0,
    )

    theta = np.linspace(0.0, 2.0 * np.pi, POLYGON_VERTICES, endpoint=False)
    radius = _boundary_radius(theta, config.radius_mean, amplitudes, phases)
    gt_polygon = np.stack(
        [center[0] + radius * np.sin(theta), center[1] + radius * np.cos(theta)],
        axis=1,
    )
    mask = rasterize_polygon(gt_polygon, h, w)
    if not mask.any():
        raise PhantomConfigError("degenerate config produced an empty mask")
    ii, jj = np.nonzero(mask)
    centroid = (float(ii.mean()), float(jj.mean()))

    image = background_field(h, w)
    image[mask] = config.roi_intensity

    if rng.random() < config.shadow_probability:
        _draw_shadow(image, mask, center, config, rng,
                     radius_fn=lambda t: _boundary_radius(t, config.radius_mean,
                                                          amplitudes, phases))

    if config.speckle_sigma > 0:
        speckle = np.exp(rng.normal(0.0, config.speckle_sigma, size=(h, w)))
        image = image * speckle
    return Phantom(image=np.clip(image, 0.0, 1.0), mask=mask,
                   gt_polygon=gt_polygon, centroid=centroid)


def _draw_shadow(image, mask, center, config, rng, radius_fn):
    """Darken a wedge of the ROI, kept strictly interior and area-capped."""
    ii, jj = np.nonzero(mask)
    di = ii + 0.5 - center[0]
    dj = jj + 0.5 - center[1]
    pix_theta = np.arctan2(di, dj)  # angle convention matches (sin, cos) above
    pix_r = np.hypot(di, dj)
    boundary_r = radius_fn(pix_theta)

    direction = rng.uniform(-np.pi, np.pi)
    half_width = rng.uniform(0.15, 0.45)
    reach = rng.uniform(0.4, 0.85)
    area_cap = config.shadow_max_fraction * mask.sum()

    ang = np.angle(np.exp(1j * (pix_theta - direction)))
    for _ in range(12):
        wedge = (np.abs(ang) <= half_width) & (pix_r <= reach * (boundary_r - 2.0))
        if wedge.sum() <= area_cap:
            break
        half_width *= 0.8
        reach *= 0.9
    else:
        return
    image[ii[wedge], jj[wedge]] *= SHADOW_SCALE


def generate_dataset(n: int, config: PhantomConfig, seed: int) -> list:
    """n phantoms; phantom k uses mix_seed(seed, k), so the list is
    deterministic and insensitive to generation order."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return [generate_phantom(config, mix_seed(seed, k)) for k in range(n)]


# ---------------------------------------------------------------------------
# PGM (P5) interchange + JSON sidecar


def save_pgm(array: np.ndarray, path) -> None:
    """Write a [0, 1] image or boolean mask as binary 8-bit PGM."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("PGM output needs a 2-D array")
    if arr.dtype == bool:
        data = np.where(arr, 255, 0).astype(np.uint8)
    else:
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        data = np.round(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM back as float64 in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":  # comment line
                pos = raw.index(b"\n", pos) + 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1  # single whitespace after maxval
    except (ValueError, IndexError) as exc:
        raise PGMFormatError(f"malformed PGM header in {path}") from exc
    if fields[0] != b"P5":
        raise PGMFormatError(f"malformed PGM: {path} is not binary P5")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise PGMFormatError(f"malformed PGM header in {path}") from exc
    if maxval != 255:
        raise PGMFormatError(f"malformed PGM: unsupported maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h:
        raise PGMFormatError(
            f"malformed PGM: expected {w * h} pixel bytes, found {len(body)}"
        )
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


def phantom_sidecar(phantom: Phantom) -> dict:
    return {
        "centroid": [phantom.centroid[0], phantom.centroid[1]],
        "polygon": [[float(i), float(j)] for i, j in phantom.gt_polygon],
    }


def save_phantom(phantom: Phantom, directory, stem: str) -> list:
    """Write image/mask PGMs plus the JSON sidecar; returns written paths."""
    import os

    paths = [
        os.path.join(directory, f"{stem}_image.pgm"),
        os.path.join(directory, f"{stem}_mask.pgm"),
        os.path.join(directory, f"{stem}_gt.json"),
    ]
    save_pgm(phantom.image, paths[0])
    save_pgm(phantom.mask, paths[1])
    with open(paths[2], "w") as f:
        json.dump(phantom_sidecar(phantom), f)
    return paths


def load_phantom(directory, stem: str) -> Phantom:
    import os

    image = load_pgm(os.path.join(directory, f"{stem}_image.pgm"))
    mask = load_pgm(os.path.join(directory, f"{stem}_mask.pgm")) > 0.5
    with open(os.path.join(directory, f"{stem}_gt.json")) as f:
        sidecar = json.load(f)
    return Phantom(
        image=image,
        mask=mask,
        gt_polygon=np.asarray(sidecar["polygon"], dtype=np.float64),
        centroid=(float(sidecar["centroid"][0]), float(sidecar["centroid"][1])),
    )
