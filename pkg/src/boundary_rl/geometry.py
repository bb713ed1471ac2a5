"""Polygon rasterization shared by phantom ground truth and predicted boundaries.

Scanline even-odd fill with the pixel-center rule: pixel (i, j) is inside
iff its center (i + 0.5, j + 0.5) lies inside the polygon. Using one
rasterizer for both ground-truth masks and predicted masks keeps Dice
comparisons free of convention mismatches.
"""

import numpy as np


def rasterize_polygon(vertices, height: int, width: int) -> np.ndarray:
    """Fill a closed polygon into a boolean (height, width) mask.

    vertices: sequence of (i, j) points, implicitly closed. Edges are
    treated half-open in i (lower endpoint inclusive) so shared vertices
    are counted once; horizontal edges contribute no crossings.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise ValueError("polygon needs at least 3 (i, j) vertices")
    mask = np.zeros((height, width), dtype=bool)

    vi = verts[:, 0]
    vj = verts[:, 1]
    wi = np.roll(vi, -1)
    wj = np.roll(vj, -1)

    i_lo = max(0, int(np.floor(verts[:, 0].min() - 0.5)))
    i_hi = min(height - 1, int(np.ceil(verts[:, 0].max())))
    for i in range(i_lo, i_hi + 1):
        cy = i + 0.5
        # half-open crossing rule: edge crosses the scanline iff exactly
        # one endpoint is below it
        below = vi <= cy
        crossing = below != (wi <= cy)
        if not crossing.any():
            continue
        t = (cy - vi[crossing]) / (wi[crossing] - vi[crossing])
        xs = np.sort(vj[crossing] + t * (wj[crossing] - vj[crossing]))
        for x0, x1 in zip(xs[0::2], xs[1::2]):
            # pixel centers j + 0.5 in [x0, x1)
            j_start = max(0, int(np.ceil(x0 - 0.5)))
            j_end = min(width, int(np.ceil(x1 - 0.5)))
            if j_end > j_start:
                mask[i, j_start:j_end] = True
    return mask
