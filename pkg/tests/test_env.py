import json

import numpy as np
import pytest

from boundary_rl import env
from boundary_rl.env import Action, EnvConfig
from boundary_rl.oracles import (AvoidCentroidPolicy, GreedyCentroidPolicy,
                                 MaskOverlapClassifier)
from boundary_rl.phantom import PhantomConfig, generate_phantom

CFG48 = EnvConfig(patch_size=12, step_size=2, max_steps=200)
PH48 = PhantomConfig(height=48, width=48, radius_mean=12.0, radius_jitter=0.15,
                     speckle_sigma=0.1, shadow_probability=0.0)


class ConstantClassifier:
    """Pixel-agnostic stub with a fixed probability."""

    decision_threshold = 0.9

    def __init__(self, prob):
        self.prob = prob

    def predict_proba(self, patch, center=None):
        return self.prob


class BrightFractionClassifier:
    """Simple pixel-based presence rule: fires when enough pixels are bright.

    Unlike the mask oracle this one *can* be blinded by noise masking, so
    it exercises the full termination-noise contract.
    """

    decision_threshold = 0.9

    def __init__(self, intensity_threshold=0.5, fraction=0.3):
        self.intensity_threshold = intensity_threshold
        self.fraction = fraction

    def predict_proba(self, patch, center=None):
        frac = float(np.mean(patch > self.intensity_threshold))
        return 1.0 if frac >= self.fraction else 0.0


# -- estimate_centroid ---------------------------------------------------------


def test_centroid_of_bright_disc():
    img = np.full((96, 96), 0.1)
    ii, jj = np.indices(img.shape)
    img[(ii - 48) ** 2 + (jj - 48) ** 2 <= 20 ** 2] = 0.9
    ci, cj = env.estimate_centroid(img)
    assert abs(ci - 48) <= 2 and abs(cj - 48) <= 2


def test_centroid_of_flat_image_errors():
    with pytest.raises(ValueError):
        env.estimate_centroid(np.full((32, 32), 0.5))


def test_centroid_translation_equivariance():
    rng = np.random.default_rng(0)
    img = np.full((96, 96), 0.1) + rng.normal(0, 0.01, (96, 96))
    ii, jj = np.indices(img.shape)
    img[(ii - 40) ** 2 + (jj - 40) ** 2 <= 15 ** 2] = 0.9
    shifted = np.roll(np.roll(img, 5, axis=0), 3, axis=1)
    ci, cj = env.estimate_centroid(img)
    si, sj = env.estimate_centroid(shifted)
    assert abs(si - ci - 5) <= 0.5
    assert abs(sj - cj - 3) <= 0.5


# -- reset ---------------------------------------------------------------------


def test_reset_edge_frequencies():
    p = generate_phantom(PH48, seed=1)
    edges = {"top": 0, "bottom": 0, "left": 0, "right": 0}
    half = CFG48.patch_size // 2
    hi = 48 - CFG48.patch_size + half
    for k in range(1000):
        s = env.reset(p, episode_index=k, seed=42, config=CFG48)
        i, j = s.c
        if i == half:
            edges["top"] += 1
        elif i == hi:
            edges["bottom"] += 1
        elif j == half:
            edges["left"] += 1
        else:
            assert j == hi
            edges["right"] += 1
    for count in edges.values():
        assert abs(count / 1000 - 0.25) <= 0.05


def test_reset_deterministic():
    p = generate_phantom(PH48, seed=1)
    a = env.reset(p, episode_index=3, seed=9, config=CFG48)
    b = env.reset(p, episode_index=3, seed=9, config=CFG48)
    assert a.c == b.c and a.prev_dist == b.prev_dist


def test_reset_footprint_inside_image():
    p = generate_phantom(PH48, seed=2)
    half = CFG48.patch_size // 2
    for k in range(200):
        s = env.reset(p, episode_index=k, seed=5, config=CFG48)
        i, j = s.c
        assert half <= i <= 48 - CFG48.patch_size + half
        assert half <= j <= 48 - CFG48.patch_size + half


def test_reset_stratified_cycles_edges():
    p = generate_phantom(PH48, seed=1)
    half = CFG48.patch_size // 2
    hi = 48 - CFG48.patch_size + half
    starts = [env.reset(p, episode_index=k, seed=0, config=CFG48,
                        start_mode="stratified").c for k in range(8)]
    assert starts[0][0] == half and starts[4][0] == half      # top
    assert starts[1][0] == hi and starts[5][0] == hi          # bottom
    assert starts[2][1] == half and starts[6][1] == half      # left
    assert starts[3][1] == hi and starts[7][1] == hi          # right
    assert starts[0] != starts[4]  # offsets spread along the edge


# -- step ----------------------------------------------------------------------


def _state_at(c, centroid, image=None, cfg=CFG48, t=0):
    if image is None:
        image = np.full((48, 48), 0.2)
    prev = float(np.hypot(c[0] - centroid[0], c[1] - centroid[1]))
    return env.EnvState(working_image=image, c=c, prev_dist=prev, t=t,
                        c_p=centroid, terminated=False, truncated=False,
                        config=cfg)


def test_step_r_mov_toward_target():
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=100)
    state = _state_at((10, 10), (40.0, 40.0), cfg=cfg)
    out = env.step(state, Action.RIGHT, ConstantClassifier(0.0))
    assert out.next_state.c == (10, 11)
    assert out.r_mov == 1 and out.reward == 1.0


def test_step_r_mov_equality_case_is_positive():
    # (3,4) -> (4,4)? need same distance: centroid (0,0), from (3,4) dist 5
    # move DOWN to (4,4) gives sqrt(32) > 5; instead craft equality via
    # clamped wall move: distance unchanged -> +1
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=100)
    state = _state_at((6, 10), (6.0, 40.0), cfg=cfg)  # at top wall (half=6)
    out = env.step(state, Action.UP, ConstantClassifier(0.0))
    assert out.next_state.c == (6, 10)  # clamped, distance unchanged
    assert out.r_mov == 1


def test_step_equal_distance_without_wall():
    # exact equality away from any wall: moving DOWN from (10, 8) with a
    # target at (11, 40) flips the row offset from -1 to +1, so the
    # distance is unchanged and the "<= 0" rule pays +1
    cfg = EnvConfig(patch_size=12, step_size=2, max_steps=100)
    state = _state_at((10, 8), (11.0, 40.0), cfg=cfg)
    out = env.step(state, Action.DOWN, ConstantClassifier(0.0))
    assert out.next_state.c == (12, 8)
    assert out.next_state.prev_dist == state.prev_dist
    assert out.r_mov == 1


def test_step_moving_away_is_negative():
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=100)
    state = _state_at((13, 14), (10.0, 10.0), cfg=cfg)
    out = env.step(state, Action.DOWN, ConstantClassifier(0.0))
    assert out.r_mov == -1
    state = _state_at((13, 14), (10.0, 10.0), cfg=cfg)
    out = env.step(state, Action.LEFT, ConstantClassifier(0.0))
    assert out.r_mov == 1


def test_step_reward_composition():
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=100)
    state = _state_at((20, 20), (40.0, 40.0), cfg=cfg)
    out = env.step(state, Action.RIGHT, ConstantClassifier(1.0))
    assert out.r_mov == 1 and out.r_term == 1 and out.reward == 101.0
    state = _state_at((20, 20), (40.0, 40.0), cfg=cfg)
    out = env.step(state, Action.UP, ConstantClassifier(0.0))
    assert out.r_mov == -1 and out.r_term == 0 and out.reward == -1.0


def test_step_reward_algebra_exhaustive():
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=100)
    seen = set()
    for toward in (True, False):
        for fires in (True, False):
            state = _state_at((20, 20), (40.0, 40.0), cfg=cfg)
            action = Action.RIGHT if toward else Action.UP
            out = env.step(state, action, ConstantClassifier(1.0 if fires else 0.0))
            seen.add(out.reward)
            assert out.reward == out.r_mov + 100 * out.r_term
    assert seen == {-1.0, 1.0, 99.0, 101.0}


def test_step_terminates_on_classifier_fire():
    state = _state_at((20, 20), (40.0, 40.0))
    out = env.step(state, Action.DOWN, ConstantClassifier(0.95))
    assert out.next_state.terminated and not out.next_state.truncated


def test_step_truncates_at_max_steps():
    cfg = EnvConfig(patch_size=12, step_size=1, max_steps=5)
    state = _state_at((20, 20), (40.0, 40.0), cfg=cfg, t=4)
    out = env.step(state, Action.DOWN, ConstantClassifier(0.0))
    assert out.next_state.truncated and not out.next_state.terminated


def test_step_on_finished_episode_raises():
    state = _state_at((20, 20), (40.0, 40.0))
    state.terminated = True
    with pytest.raises(env.EpisodeFinishedError):
        env.step(state, Action.UP, ConstantClassifier(0.0))


def test_binarize_threshold_not_met_at_exactly_09():
    state = _state_at((20, 20), (40.0, 40.0))
    out = env.step(state, Action.DOWN, ConstantClassifier(0.9))
    assert out.r_term == 0


# -- termination noise -----------------------------------------------------------


def test_termination_noise_blinds_pixel_classifier():
    p = generate_phantom(PH48, seed=3)
    clf = BrightFractionClassifier()
    state = _state_at((24, 24), p.centroid, image=p.image.copy())
    assert clf.predict_proba(p.image[18:30, 18:30]) == 1.0
    state.terminated = True
    ok = env.apply_termination_noise(state, clf, np.random.default_rng(0))
    assert ok
    si, sj = slice(18, 30), slice(18, 30)
    assert clf.predict_proba(state.working_image[si, sj]) == 0.0


def test_termination_noise_locality_and_stats():
    p = generate_phantom(PH48, seed=4)
    img = p.image.copy()
    state = _state_at((24, 24), p.centroid, image=img)
    state.terminated = True
    before = p.image.copy()
    mu = float(np.median(img))
    sigma = float(img.std())
    env.apply_termination_noise(state, ConstantClassifier(0.0),
                                np.random.default_rng(1))
    outside = np.ones((48, 48), dtype=bool)
    outside[18:30, 18:30] = False
    assert np.array_equal(img[outside], before[outside])
    patch_mean = img[18:30, 18:30].mean()
    assert abs(patch_mean - mu) <= 3 * sigma / np.sqrt(12 * 12) + 0.05


def test_termination_noise_requires_terminated_state():
    p = generate_phantom(PH48, seed=4)
    state = _state_at((24, 24), p.centroid, image=p.image.copy())
    with pytest.raises(ValueError):
        env.apply_termination_noise(state, ConstantClassifier(0.0),
                                    np.random.default_rng(0))


# -- run_episode -----------------------------------------------------------------


def test_greedy_policy_terminates_with_all_positive_shaping():
    p = generate_phantom(PH48, seed=5)
    clf = MaskOverlapClassifier(p.mask, CFG48.patch_size)
    traj = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48, seed=0,
                           centroid=p.centroid)
    assert traj.terminated
    assert len(traj) < CFG48.max_steps
    assert traj.r_term[-1] == 1
    assert np.all(traj.r_mov == 1)


def test_avoidant_policy_truncates_at_exactly_T():
    p = generate_phantom(PH48, seed=5)
    clf = MaskOverlapClassifier(p.mask, CFG48.patch_size)
    cfg = EnvConfig(patch_size=12, step_size=2, max_steps=50)
    traj = env.run_episode(p, AvoidCentroidPolicy(), clf, cfg, seed=0,
                           centroid=p.centroid)
    assert traj.truncated and not traj.terminated
    assert len(traj) == 50
    # once distance strictly increases every step, r_mov is -1 (walls can
    # pin the agent, in which case the unchanged distance earns +1)
    moved = [i for i in range(len(traj))
             if traj.centers[i] != (traj.centers[i - 1] if i else traj.start)]
    assert all(traj.r_mov[i] == -1 for i in moved)


def test_run_episode_deterministic():
    p = generate_phantom(PH48, seed=6)
    clf = MaskOverlapClassifier(p.mask, CFG48.patch_size)
    a = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48, seed=3)
    b = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48, seed=3)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)
    assert a.centers == b.centers


def test_run_episode_rewards_in_allowed_set():
    p = generate_phantom(PH48, seed=7)
    clf = MaskOverlapClassifier(p.mask, CFG48.patch_size)
    traj = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48, seed=1)
    assert set(np.unique(traj.rewards)) <= {-1.0, 1.0, 99.0, 101.0}
    assert all(r in (-1.0, 1.0) for r in traj.rewards[:-1])


def test_episodes_accumulate_noise_and_never_repeat_termination_center():
    p = generate_phantom(PH48, seed=8)
    clf = BrightFractionClassifier()
    working = p.image.copy()
    seen = set()
    for m in range(12):
        traj = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48,
                               seed=11, working_image=working,
                               centroid=p.centroid, episode_index=m,
                               start_mode="stratified")
        if traj.terminated:
            assert traj.centers[-1] not in seen
            seen.add(traj.centers[-1])
    assert len(seen) >= 4


def test_trajectory_dump_jsonl(tmp_path):
    p = generate_phantom(PH48, seed=9)
    clf = MaskOverlapClassifier(p.mask, CFG48.patch_size)
    traj = env.run_episode(p, GreedyCentroidPolicy(), clf, CFG48, seed=2)
    path = tmp_path / "traj.jsonl"
    env.dump_trajectory(traj, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(traj)
    assert rows[-1]["r_term"] == 1
    assert set(rows[0]) == {"t", "c", "action", "r_mov", "r_term", "reward"}
