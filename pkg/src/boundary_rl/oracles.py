"""Scripted reference agents: learning-free stand-ins for the policy and
classifier, used to validate the environment and delineation geometry
independently of any training."""

import numpy as np

from .classifier import patch_overlap
from .env import Action, EnvState


class GreedyCentroidPolicy:
    """Deterministic policy that always takes the move minimizing the
    distance to the shaping centroid (ties broken by action order)."""

    def act(self, state: EnvState, rng):
        step = state.config.step_size
        best_action, best_dist = None, None
        for action in Action:
            di, dj = action.delta(step)
            dist = np.hypot(state.c[0] + di - state.c_p[0],
                            state.c[1] + dj - state.c_p[1])
            if best_dist is None or dist < best_dist:
                best_action, best_dist = action, dist
        return best_action, 0.0, 0.0, None


class AvoidCentroidPolicy:
    """Adversarial reference: always increases distance when possible."""

    def act(self, state: EnvState, rng):
        step = state.config.step_size
        best_action, best_dist = None, None
        for action in Action:
            di, dj = action.delta(step)
            dist = np.hypot(state.c[0] + di - state.c_p[0],
                            state.c[1] + dj - state.c_p[1])
            if best_dist is None or dist > best_dist:
                best_action, best_dist = action, dist
        return best_action, 0.0, 0.0, None


class MaskOverlapClassifier:
    """Ground-truth presence oracle: fires when the patch footprint covers
    at least overlap_threshold of its area in ROI mask pixels.

    Location-based: it judges the footprint against the stored mask, not
    the pixel values, so noise masking cannot blind it (the environment
    skips noise verification for such classifiers).
    """

    location_based = True
    decision_threshold = 0.9

    def __init__(self, mask: np.ndarray, patch_size: int,
                 overlap_threshold: float = 0.5):
        self.mask = np.asarray(mask, dtype=bool)
        self.patch_size = patch_size
        self.overlap_threshold = overlap_threshold

    def predict_proba(self, patch, center=None) -> float:
        if center is None:
            raise ValueError("MaskOverlapClassifier needs the patch center")
        overlap = patch_overlap(self.mask, center, self.patch_size)
        return 1.0 if overlap >= self.overlap_threshold else 0.0


class DatasetOverlapOracle:
    """Ground-truth oracle for multi-image training: the training loop
    calls for_phantom() to bind each image's mask before its episodes."""

    location_based = True
    decision_threshold = 0.9

    def __init__(self, patch_size: int, overlap_threshold: float = 0.5):
        self.patch_size = patch_size
        self.overlap_threshold = overlap_threshold

    def for_phantom(self, phantom) -> MaskOverlapClassifier:
        return MaskOverlapClassifier(phantom.mask, self.patch_size,
                                     self.overlap_threshold)

    def predict_proba(self, patch, center=None):
        raise RuntimeError("bind an image first via for_phantom(phantom)")
