"""Patch-level object-presence classifier used as the frozen reward oracle.

A small conv net maps a PxP patch to a presence probability. Training
labels come from ground-truth mask overlap: a patch is positive when at
least OVERLAP_THRESHOLD of its area covers the ROI. After training the
model is frozen; the environment only queries probabilities and rounds
them with binarize() at the 0.9 decision threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .seeds import mix_seed

OVERLAP_THRESHOLD = 0.01
DECISION_THRESHOLD = 0.9


class SingleClassError(ValueError):
    """Training data must contain both labels."""


class InsufficientPatchesError(RuntimeError):
    """Requested patch balance could not be met."""


@dataclass
class PatchSample:
    patch: np.ndarray  # (P, P) float64 in [0, 1]
    label: int         # 1 iff mask overlap >= OVERLAP_THRESHOLD of patch area


@dataclass
class ClassifierModel:
    net: nn.Network
    patch_size: int
    decision_threshold: float = DECISION_THRESHOLD
    training_log: list = field(default_factory=list, repr=False)

    def predict_proba(self, patch, center=None) -> float:
        """Presence probability; `center` is accepted for interface
        compatibility with location-based oracles and ignored."""
        return predict_presence(self, patch)


def default_arch(patch_size: int):
    return (
        {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 2,
         "padding": "valid"},
        {"kind": "relu"},
        {"kind": "conv", "out_channels": 16, "kernel": 3, "stride": 2,
         "padding": "valid"},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "units": 1},
        {"kind": "sigmoid"},
    )


def init_classifier(patch_size: int, seed: int) -> ClassifierModel:
    net = nn.init_network(default_arch(patch_size), (1, patch_size, patch_size),
                          np.random.default_rng(seed))
    return ClassifierModel(net=net, patch_size=patch_size)


# ---------------------------------------------------------------------------
# patch extraction


def patch_slices(center, patch_size: int):
    """Footprint of an even-sized patch centered at integer (i, j):
    rows [i - P/2, i + P/2), cols likewise."""
    half = patch_size // 2
    i, j = int(center[0]), int(center[1])
    return slice(i - half, i - half + patch_size), slice(j - half, j - half + patch_size)


def patch_overlap(mask: np.ndarray, center, patch_size: int) -> float:
    si, sj = patch_slices(center, patch_size)
    return float(mask[si, sj].sum()) / float(patch_size * patch_size)


def patch_label(mask: np.ndarray, center, patch_size: int,
                threshold: float = OVERLAP_THRESHOLD) -> int:
    return int(patch_overlap(mask, center, patch_size) >= threshold)


def extract_patches(dataset, count: int, patch_size: int, balance: float = 0.5,
                    seed: int = 0) -> list:
    """Sample `count` labeled patches with a positive fraction of ~balance.

    Centers are drawn uniformly over positions whose footprint stays
    inside the image; samples are accepted against per-class quotas, so
    the realized positive fraction equals round(count * balance) / count.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    h, w = dataset[0].image.shape
    if patch_size > min(h, w):
        raise ValueError("patch_size exceeds image size")
    rng = np.random.default_rng(mix_seed(seed, 0xBA7C))
    half = patch_size // 2
    want_pos = int(round(count * balance))
    want_neg = count - want_pos
    samples = []
    attempts = 0
    max_attempts = 500 * max(count, 1)
    while want_pos > 0 or want_neg > 0:
        attempts += 1
        if attempts > max_attempts:
            raise InsufficientPatchesError(
                f"could not reach balance={balance}: {want_pos} positives and "
                f"{want_neg} negatives still missing after {attempts} draws"
            )
        p = dataset[rng.integers(len(dataset))]
        center = (rng.integers(half, h - half + 1), rng.integers(half, w - half + 1))
        label = patch_label(p.mask, center, patch_size)
        if label == 1 and want_pos > 0:
            want_pos -= 1
        elif label == 0 and want_neg > 0:
            want_neg -= 1
        else:
            continue
        si, sj = patch_slices(center, patch_size)
        samples.append(PatchSample(patch=p.image[si, sj].copy(), label=label))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class ClassifierTrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 12
    holdout_fraction: float = 0.1
    shuffle: bool = True
    seed: int = 0


def _evaluate(model: ClassifierModel, patches: np.ndarray, labels: np.ndarray):
    probs, _ = nn.forward(model.net, patches)
    probs = probs[:, 0]
    losses, _ = nn.bce_loss(probs, labels)
    acc = float(np.mean((probs > 0.5).astype(int) == labels))
    return float(np.mean(losses)), acc


def train_classifier(samples, config: ClassifierTrainConfig = ClassifierTrainConfig()
                     ) -> ClassifierModel:
    """Train with BCE + Adam; returns the epoch snapshot with the lowest
    held-out BCE (the initial weights count as epoch 0).

    The per-epoch log rows land in model.training_log as dicts with keys
    epoch, train_bce, holdout_bce, holdout_acc.
    """
    labels_all = np.array([s.label for s in samples], dtype=np.float64)
    if len(np.unique(labels_all)) < 2:
        raise SingleClassError("training data contains a single class")
    patch_size = samples[0].patch.shape[0]
    patches_all = np.stack([s.patch for s in samples])[:, None, :, :]

    n_hold = int(round(len(samples) * config.holdout_fraction))
    if n_hold > 0:
        rng = np.random.default_rng(mix_seed(config.seed, 0x7A1))
        perm = rng.permutation(len(samples))
        hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    else:
        hold_idx, train_idx = np.array([], dtype=int), np.arange(len(samples))
    x_train, y_train = patches_all[train_idx], labels_all[train_idx]
    x_hold, y_hold = patches_all[hold_idx], labels_all[hold_idx]

    model = init_classifier(patch_size, seed=mix_seed(config.seed, 0x1417))
    adam = nn.init_adam(model.net.params, lr=config.lr)

    if n_hold > 0:
        best_bce, best_acc = _evaluate(model, x_hold, y_hold)
    else:
        best_bce, best_acc = float("inf"), float("nan")
    best_params = model.net.copy_params()
    log = [{"epoch": 0, "train_bce": float("nan"), "holdout_bce": best_bce,
            "holdout_acc": best_acc}]

    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            order = np.random.default_rng(
                mix_seed(config.seed, 0xE0 + epoch)).permutation(n)
        else:
            order = np.arange(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            probs, cache = nn.forward(model.net, xb)
            losses, dldp = nn.bce_loss(probs[:, 0], yb)
            epoch_losses.append(float(np.mean(losses)))
            grads, _ = nn.backward(model.net, cache,
                                   (dldp / len(idx))[:, None])
            nn.adam_step(model.net.params, grads, adam)
        if n_hold > 0:
            hold_bce, hold_acc = _evaluate(model, x_hold, y_hold)
        else:
            hold_bce, hold_acc = float("nan"), float("nan")
        log.append({"epoch": epoch, "train_bce": float(np.mean(epoch_losses)),
                    "holdout_bce": hold_bce, "holdout_acc": hold_acc})
        if n_hold > 0 and hold_bce < best_bce:
            best_bce = hold_bce
            best_params = model.net.copy_params()

    if n_hold > 0:
        model.net.set_params(best_params)
    model.training_log = log
    return model


# ---------------------------------------------------------------------------
# inference


def predict_presence(model: ClassifierModel, patch) -> float:
    """Probability that the patch contains the object; deterministic."""
    patch = np.asarray(patch, dtype=np.float64)
    expected = (model.patch_size, model.patch_size)
    if patch.shape != expected:
        raise nn.ShapeError(f"patch shape {patch.shape} != {expected}")
    out, _ = nn.forward(model.net, patch[None, None, :, :])
    p = float(out[0, 0])
    return min(max(p, nn.BCE_EPS), 1.0 - nn.BCE_EPS)


def binarize(probability: float, threshold: float = DECISION_THRESHOLD) -> int:
    """1 iff probability strictly exceeds the decision threshold."""
    return int(probability > threshold)


# ---------------------------------------------------------------------------
# persistence


def save_classifier(path, model: ClassifierModel, meta: dict | None = None) -> None:
    info = {"patch_size": model.patch_size,
            "decision_threshold": model.decision_threshold,
            "training_log": model.training_log}
    info.update(meta or {})
    nn.save_checkpoint(path, {"classifier": model.net}, meta=info)


def load_classifier(path) -> ClassifierModel:
    nets, meta = nn.load_checkpoint(path)
    if "classifier" not in nets:
        raise nn.CheckpointError(f"{path} does not hold a classifier")
    return ClassifierModel(net=nets["classifier"],
                           patch_size=int(meta["patch_size"]),
                           decision_threshold=float(meta["decision_threshold"]),
                           training_log=list(meta.get("training_log", [])))
