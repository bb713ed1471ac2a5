"""Patch-translation MDP: walk a patch from the image edge to the object.

One environment step moves the patch center one action-step (clamped to
keep the footprint inside the image), then scores the post-move patch:

    r_mov  = +1 if the distance to the target centroid did not increase,
             -1 otherwise
    r_term = the frozen classifier's binarized presence call on the patch
    reward = r_mov + 100 * r_term

Episodes terminate when r_term fires, or truncate after max_steps. On
termination the patch footprint is overwritten with Gaussian noise so the
next episode on the same image cannot re-terminate at the same spot; the
re-drawn patch is verified to no longer trigger the classifier.
"""

import json
import logging
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .classifier import binarize, patch_slices
from .seeds import mix_seed

logger = logging.getLogger(__name__)

GOLDEN_FRACTION = 0.6180339887498949


class EpisodeFinishedError(RuntimeError):
    """step() was called on a terminated or truncated episode."""


class Action(IntEnum):
    UP = 0      # -i
    DOWN = 1    # +i
    LEFT = 2    # -j
    RIGHT = 3   # +j

    def delta(self, step_size: int):
        di, dj = ((-1, 0), (1, 0), (0, -1), (0, 1))[self.value]
        return di * step_size, dj * step_size


@dataclass(frozen=True)
class EnvConfig:
    patch_size: int = 24
    step_size: int = 2
    max_steps: int = 400
    centroid_mode: str = "intensity"  # or "ground_truth"
    noise_max_redraws: int = 3


@dataclass
class EnvState:
    working_image: np.ndarray   # shared, mutated only by termination noise
    c: tuple                    # patch center (i, j), ints
    prev_dist: float            # || c - c_p || before the next move
    t: int
    c_p: tuple                  # target centroid used for reward shaping
    terminated: bool
    truncated: bool
    config: EnvConfig


@dataclass
class StepOutcome:
    next_state: EnvState
    reward: float
    r_mov: int
    r_term: int


@dataclass
class Trajectory:
    features: list              # per-step policy observations (or None)
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    r_mov: np.ndarray
    r_term: np.ndarray
    centers: list               # post-move patch centers
    start: tuple
    terminated: bool
    truncated: bool
    bootstrap_value: float      # value estimate past the horizon (0 if terminal)
    noise_ok: bool              # termination-noise verification outcome

    def __len__(self):
        return len(self.rewards)


def estimate_centroid(image: np.ndarray):
    """Intensity-weighted centroid after subtracting the image median.

    The median removes the background level so the bright object
    dominates the estimate. All-zero weights (flat image) are an error.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    weights = np.clip(img - np.median(img), 0.0, None)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("cannot estimate centroid of a flat image")
    ii, jj = np.indices(img.shape)
    return (float((ii * weights).sum() / total),
            float((jj * weights).sum() / total))


def centroid_for(phantom, config: EnvConfig):
    if config.centroid_mode == "ground_truth":
        return phantom.centroid
    return estimate_centroid(phantom.image)


def _center_bounds(shape, patch_size):
    half = patch_size // 2
    h, w = shape
    return half, h - patch_size + half, half, w - patch_size + half


def _clamp_center(c, shape, patch_size):
    lo_i, hi_i, lo_j, hi_j = _center_bounds(shape, patch_size)
    return (int(min(max(c[0], lo_i), hi_i)), int(min(max(c[1], lo_j), hi_j)))


def reset(phantom, episode_index: int, seed: int, config: EnvConfig = EnvConfig(),
          working_image: np.ndarray | None = None, centroid=None,
          start_mode: str = "random") -> EnvState:
    """Start an episode with the patch touching one of the four edges.

    working_image carries noise masks from earlier episodes on the same
    image; omit it to start from a fresh copy. start_mode "random" picks
    edge and offset uniformly (training); "stratified" cycles the four
    edges and spreads offsets by a golden-ratio sequence (inference).
    """
    image = phantom if isinstance(phantom, np.ndarray) else phantom.image
    if working_image is None:
        working_image = image.copy()
    if centroid is None:
        centroid = (centroid_for(phantom, config)
                    if not isinstance(phantom, np.ndarray)
                    else estimate_centroid(image))
    lo_i, hi_i, lo_j, hi_j = _center_bounds(working_image.shape,
                                            config.patch_size)
    rng = np.random.default_rng(mix_seed(mix_seed(seed, episode_index), 0))
    if start_mode == "random":
        edge = int(rng.integers(4))
        frac = rng.random()
    elif start_mode == "stratified":
        edge = episode_index % 4
        frac = (0.5 + GOLDEN_FRACTION * (episode_index // 4)) % 1.0
    else:
        raise ValueError(f"unknown start_mode {start_mode!r}")
    if edge == 0:    # top
        c = (lo_i, lo_j + int(frac * (hi_j - lo_j + 1)))
    elif edge == 1:  # bottom
        c = (hi_i, lo_j + int(frac * (hi_j - lo_j + 1)))
    elif edge == 2:  # left
        c = (lo_i + int(frac * (hi_i - lo_i + 1)), lo_j)
    else:            # right
        c = (lo_i + int(frac * (hi_i - lo_i + 1)), hi_j)
    c = _clamp_center(c, working_image.shape, config.patch_size)
    prev_dist = float(np.hypot(c[0] - centroid[0], c[1] - centroid[1]))
    return EnvState(working_image=working_image, c=c, prev_dist=prev_dist,
                    t=0, c_p=centroid, terminated=False, truncated=False,
                    config=config)


def step(state: EnvState, action, classifier) -> StepOutcome:
    """Move, clamp, and score the post-move patch. Stepping a finished
    episode raises EpisodeFinishedError."""
    if state.terminated or state.truncated:
        raise EpisodeFinishedError("episode already finished")
    cfg = state.config
    di, dj = Action(action).delta(cfg.step_size)
    c_new = _clamp_center((state.c[0] + di, state.c[1] + dj),
                          state.working_image.shape, cfg.patch_size)
    dist = float(np.hypot(c_new[0] - state.c_p[0], c_new[1] - state.c_p[1]))
    r_mov = 1 if dist - state.prev_dist <= 0.0 else -1

    si, sj = patch_slices(c_new, cfg.patch_size)
    prob = float(classifier.predict_proba(state.working_image[si, sj],
                                          center=c_new))
    threshold = getattr(classifier, "decision_threshold", 0.9)
    r_term = binarize(prob, threshold)

    terminated = r_term == 1
    truncated = (not terminated) and (state.t + 1 >= cfg.max_steps)
    next_state = replace(state, c=c_new, prev_dist=dist, t=state.t + 1,
                         terminated=terminated, truncated=truncated)
    return StepOutcome(next_state=next_state,
                       reward=float(r_mov + 100 * r_term),
                       r_mov=r_mov, r_term=r_term)


def apply_termination_noise(state: EnvState, classifier, rng,
                            max_redraws: int | None = None) -> bool:
    """Overwrite the terminal patch footprint with background-like noise.

    Pixels are drawn from N(mu_bg, sigma_bg) and clipped to [0, 1], where
    mu_bg is the image median and sigma_bg the standard deviation of the
    pixels at or below the median. Restricting sigma to the dark half
    keeps the bright object out of the noise scale, so masked patches
    actually look like background (the full-image std is dominated by the
    object/background split and produces patches bright enough to re-fire
    the classifier). For pixel-based classifiers the masked patch is
    re-classified and re-drawn until binarize() == 0, up to max_redraws
    extra draws; persistent failure is logged and reported as False (the
    episode still counts). Location-based oracle classifiers cannot
    un-see a footprint, so verification is skipped for them.
    """
    if not state.terminated:
        raise ValueError("termination noise applies only to terminated episodes")
    cfg = state.config
    if max_redraws is None:
        max_redraws = cfg.noise_max_redraws
    img = state.working_image
    mu = float(np.median(img))
    sigma = float(img[img <= mu].std())
    if sigma <= 0.0:
        sigma = 0.05
    si, sj = patch_slices(state.c, cfg.patch_size)
    location_based = getattr(classifier, "location_based", False)
    for _ in range(1 + max_redraws):
        img[si, sj] = np.clip(
            rng.normal(mu, sigma, size=(cfg.patch_size, cfg.patch_size)),
            0.0, 1.0)
        if location_based:
            return True
        prob = float(classifier.predict_proba(img[si, sj], center=state.c))
        if binarize(prob, getattr(classifier, "decision_threshold", 0.9)) == 0:
            return True
    logger.warning(
        "termination noise at %s still classified positive after %d draws",
        state.c, 1 + max_redraws)
    return False


def run_episode(phantom, policy, classifier, config: EnvConfig, seed: int,
                working_image: np.ndarray | None = None, centroid=None,
                episode_index: int = 0, start_mode: str = "random",
                ) -> Trajectory:
    """Roll out one episode and return its trajectory.

    policy.act(state, rng) -> (action, log_prob, value, features). On
    truncation the bootstrap value comes from policy.state_value(state)
    when the policy provides it. Termination noise is applied (and
    verified) before returning.
    """
    state = reset(phantom, episode_index, seed, config,
                  working_image=working_image, centroid=centroid,
                  start_mode=start_mode)
    base = mix_seed(seed, episode_index)
    rng_actions = np.random.default_rng(mix_seed(base, 1))
    rng_noise = np.random.default_rng(mix_seed(base, 2))
    start = state.c

    features, actions, log_probs, values = [], [], [], []
    rewards, r_movs, r_terms, centers = [], [], [], []
    while not (state.terminated or state.truncated):
        action, log_prob, value, feats = policy.act(state, rng_actions)
        outcome = step(state, action, classifier)
        features.append(feats)
        actions.append(int(action))
        log_probs.append(float(log_prob))
        values.append(float(value))
        rewards.append(outcome.reward)
        r_movs.append(outcome.r_mov)
        r_terms.append(outcome.r_term)
        centers.append(outcome.next_state.c)
        state = outcome.next_state

    noise_ok = True
    bootstrap = 0.0
    if state.terminated:
        noise_ok = apply_termination_noise(state, classifier, rng_noise)
    else:
        value_fn = getattr(policy, "state_value", None)
        if value_fn is not None:
            bootstrap = float(value_fn(state))
    return Trajectory(
        features=features,
        actions=np.array(actions, dtype=np.int64),
        log_probs=np.array(log_probs, dtype=np.float64),
        values=np.array(values, dtype=np.float64),
        rewards=np.array(rewards, dtype=np.float64),
        r_mov=np.array(r_movs, dtype=np.int64),
        r_term=np.array(r_terms, dtype=np.int64),
        centers=centers,
        start=start,
        terminated=state.terminated,
        truncated=state.truncated,
        bootstrap_value=bootstrap,
        noise_ok=noise_ok,
    )


def dump_trajectory(trajectory: Trajectory, path) -> None:
    """Debug dump: one JSON record per step."""
    with open(path, "w") as f:
        for t in range(len(trajectory)):
            f.write(json.dumps({
                "t": t,
                "c": list(trajectory.centers[t]),
                "action": int(trajectory.actions[t]),
                "r_mov": int(trajectory.r_mov[t]),
                "r_term": int(trajectory.r_term[t]),
                "reward": float(trajectory.rewards[t]),
            }) + "\n")
