import numpy as np
import pytest
from scipy import stats as scipy_stats

from boundary_rl import evalkit
from boundary_rl.classifier import patch_overlap
from boundary_rl.phantom import PhantomConfig, generate_dataset, generate_phantom

PH = PhantomConfig(height=48, width=48, radius_mean=12.0, radius_jitter=0.15,
                   speckle_sigma=0.1, shadow_probability=0.0)


class ConstantClassifier:
    def __init__(self, prob, patch_size=12):
        self.prob = prob
        self.patch_size = patch_size

    def predict_proba(self, patch, center=None):
        return self.prob


class CenterInROIClassifier:
    """Fires iff the patch center pixel lies inside the stored ROI mask."""

    def __init__(self, mask, patch_size=12):
        self.mask = mask
        self.patch_size = patch_size

    def predict_proba(self, patch, center=None):
        return 1.0 if self.mask[int(center[0]), int(center[1])] else 0.0


# -- dice -----------------------------------------------------------------------


def test_dice_identical():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 2:5] = True
    assert evalkit.dice(m, m) == 1.0


def test_dice_disjoint():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0:2, 0:2] = True
    b[5:7, 5:7] = True
    assert evalkit.dice(a, b) == 0.0


def test_dice_half_overlap_formula():
    a = np.zeros((20, 20), dtype=bool)
    b = np.zeros((20, 20), dtype=bool)
    a[0:10, 0:10] = True          # |A| = 100
    b[0:10, 5:15] = True          # |B| = 100, |A n B| = 50
    assert evalkit.dice(a, b) == 2 * 50 / 200


def test_dice_symmetric_and_empty():
    rng = np.random.default_rng(0)
    a = rng.random((10, 10)) > 0.5
    b = rng.random((10, 10)) > 0.5
    assert evalkit.dice(a, b) == evalkit.dice(b, a)
    empty = np.zeros((10, 10), dtype=bool)
    assert evalkit.dice(empty, empty) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        evalkit.dice(np.zeros((4, 4), dtype=bool), np.zeros((5, 5), dtype=bool))


# -- t_test ----------------------------------------------------------------------


def test_t_test_identical_lists():
    t, p = evalkit.t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and p == 1.0


def test_t_test_hand_computed_welch():
    # means 3 and 4, both variances 2.5, n=5: se = 1, t = -1, dof = 8
    a = [1.0, 2.0, 3.0, 4.0, 5.0]
    b = [2.0, 3.0, 4.0, 5.0, 6.0]
    t, p = evalkit.t_test(a, b)
    assert t == pytest.approx(-1.0, abs=1e-12)
    assert p == pytest.approx(2 * scipy_stats.t.sf(1.0, 8), abs=1e-12)


def test_t_test_scale_invariance():
    rng = np.random.default_rng(1)
    a = rng.normal(0.5, 0.1, 10)
    b = rng.normal(0.6, 0.2, 12)
    t1, p1 = evalkit.t_test(a, b)
    t2, p2 = evalkit.t_test(7.5 * a, 7.5 * b)
    assert t1 == pytest.approx(t2, rel=1e-12)
    assert p1 == pytest.approx(p2, rel=1e-12)


def test_t_test_matches_scipy():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 1.0, 15)
    b = rng.normal(0.3, 2.0, 9)
    t, p = evalkit.t_test(a, b)
    ref = scipy_stats.ttest_ind(a, b, equal_var=False)
    assert t == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-12)


def test_t_test_zero_variance_equal_means_errors():
    with pytest.raises(evalkit.ZeroVarianceError):
        evalkit.t_test([2.0, 2.0, 2.0], [2.0, 2.0])


def test_t_test_zero_variance_different_means():
    t, p = evalkit.t_test([1.0, 1.0], [2.0, 2.0])
    assert t == -np.inf and p == 0.0


# -- sliding window ---------------------------------------------------------------


def test_sliding_window_constant_one_fills_image():
    img = np.zeros((48, 48))
    mask = evalkit.sliding_window_segment(img, ConstantClassifier(1.0), stride=4)
    assert mask.all()


def test_sliding_window_constant_zero_empty():
    img = np.zeros((48, 48))
    mask = evalkit.sliding_window_segment(img, ConstantClassifier(0.0), stride=4)
    assert not mask.any()


def test_sliding_window_center_oracle_dice():
    p = generate_phantom(PH, seed=31)
    clf = CenterInROIClassifier(p.mask, patch_size=12)
    mask = evalkit.sliding_window_segment(p.image, clf, stride=1)
    assert evalkit.dice(mask, p.mask) >= 0.8


def test_sliding_window_translation_consistency():
    p = generate_phantom(PH, seed=32)
    clf = CenterInROIClassifier(p.mask, patch_size=12)
    stride = 2
    mask = evalkit.sliding_window_segment(p.image, clf, stride=stride)
    shifted_mask_input = np.roll(p.mask, stride, axis=0)
    clf2 = CenterInROIClassifier(shifted_mask_input, patch_size=12)
    mask2 = evalkit.sliding_window_segment(p.image, clf2, stride=stride)
    # interior rows shift correspondingly
    inner = slice(12, 36)
    assert np.array_equal(np.roll(mask, stride, axis=0)[inner, inner],
                          mask2[inner, inner])


def test_sliding_window_stride_validation():
    with pytest.raises(ValueError):
        evalkit.sliding_window_segment(np.zeros((24, 24)),
                                       ConstantClassifier(1.0), stride=0)


# -- evaluate ---------------------------------------------------------------------


def test_evaluate_ground_truth_method_perfect():
    dataset = generate_dataset(4, PH, seed=40)
    reports, tests = evalkit.evaluate(dataset, {"oracle": lambda p: p.mask})
    assert reports[0].mean == 1.0
    assert reports[0].std == 0.0
    assert tests == {}


def test_evaluate_pairwise_and_identical_methods():
    dataset = generate_dataset(5, PH, seed=41)

    def half_mask(p):
        m = p.mask.copy()
        m[:, :24] = False
        return m

    reports, tests = evalkit.evaluate(
        dataset, [("a", half_mask), ("b", half_mask)])
    t, p = tests[("a", "b")]
    assert t == 0.0 and p == 1.0


def test_evaluate_csv_determinism(tmp_path):
    dataset = generate_dataset(3, PH, seed=42)

    def shrunk(p):
        m = p.mask.copy()
        m[::3] = False
        return m

    methods = [("oracle", lambda p: p.mask), ("shrunk", shrunk)]
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    evalkit.evaluate(dataset, methods, out_dir=dir_a)
    evalkit.evaluate(dataset, methods, out_dir=dir_b)
    for name in ("results.csv", "summary.csv", "tests.csv"):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()
    header = (dir_a / "tests.csv").read_text().splitlines()[0]
    assert header == "method_a,method_b,t_value,p_value"
