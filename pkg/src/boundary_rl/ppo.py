"""Policy optimization for the patch controller.

The controller network shares a conv trunk (3 conv layers + 1 dense)
between two heads: 4 action logits and a scalar state value. Training is
synchronous PPO: collect whole episodes until the transition buffer
reaches the batch size, compute discounted returns and GAE advantages,
then run several epochs of clipped-surrogate minibatch updates with Adam.

Gradients of the clipped objective are assembled analytically (the
surrogate and entropy terms reduce to closed-form logit gradients) and
are checked against finite differences in the test suite.
"""

import csv
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .env import Trajectory, centroid_for, run_episode
from .seeds import mix_seed


class PPOUpdateError(RuntimeError):
    """A non-finite loss aborted an update; the policy was left unchanged."""


@dataclass(frozen=True)
class PolicyConfig:
    feature_size: int = 32
    conv_channels: tuple = (8, 16, 32)
    dense_units: int = 64


@dataclass(frozen=True)
class PPOConfig:
    # gamma sits below 0.99 deliberately: at gamma = 1/(1 - 1/100) the
    # discounted value of farming the +1 movement reward forever equals
    # the +100 terminal bonus exactly, and training reliably collapses
    # into wall-hugging; 0.95 keeps termination worth gamma^d * 80 more
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    lr_final: float | None = 1e-4   # anneal target; None = constant
    batch_size: int = 4096          # transitions per update
    minibatch_size: int = 256
    update_epochs: int = 4
    entropy_coef: float = 0.05
    entropy_coef_final: float | None = 0.003  # anneal target; None = constant
    value_coef: float = 0.5
    episodes_per_image: int = 24    # M
    max_updates: int = 300
    target_termination_rate: float = 0.95
    convergence_window: int = 10
    checkpoint_every: int = 25


@dataclass
class PolicyModel:
    trunk: nn.Network
    policy_head: nn.Network
    value_head: nn.Network
    config: PolicyConfig
    training_log: list = field(default_factory=list, repr=False)

    def parameters(self) -> dict:
        params = {}
        for prefix, net in self._nets().items():
            for k, v in net.params.items():
                params[f"{prefix}:{k}"] = v
        return params

    def _nets(self) -> dict:
        return {"trunk": self.trunk, "policy_head": self.policy_head,
                "value_head": self.value_head}

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.parameters().items()}

    def set_params(self, params: dict) -> None:
        for k, v in self.parameters().items():
            v[...] = params[k]

    def num_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    # agent interface used by env.run_episode
    def act(self, state, rng):
        features = build_state_features(state.working_image, state.c,
                                        state.config.patch_size,
                                        self.config.feature_size)
        action, log_prob, value = act(self, features, rng)
        return action, log_prob, value, features

    def state_value(self, state) -> float:
        features = build_state_features(state.working_image, state.c,
                                        state.config.patch_size,
                                        self.config.feature_size)
        _, values, _ = policy_forward(self, features[None])
        return float(values[0])


def policy_arch(config: PolicyConfig):
    trunk = []
    for out_ch in config.conv_channels:
        trunk.append({"kind": "conv", "out_channels": out_ch, "kernel": 3,
                      "stride": 2, "padding": "valid"})
        trunk.append({"kind": "relu"})
    trunk.append({"kind": "flatten"})
    trunk.append({"kind": "dense", "units": config.dense_units})
    trunk.append({"kind": "relu"})
    return tuple(trunk)


def init_policy(config: PolicyConfig, seed: int) -> PolicyModel:
    d = config.feature_size
    rng = np.random.default_rng(mix_seed(seed, 0x90C1))
    trunk = nn.init_network(policy_arch(config), (2, d, d), rng)
    units = trunk.output_shape[0]
    policy_head = nn.init_network(({"kind": "dense", "units": 4},), (units,), rng)
    value_head = nn.init_network(({"kind": "dense", "units": 1},), (units,), rng)
    return PolicyModel(trunk=trunk, policy_head=policy_head,
                       value_head=value_head, config=config)


# ---------------------------------------------------------------------------
# state features


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_in cells into n_out cells by
    exact interval overlap (area averaging in one dimension)."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            m[o, i] = min(hi, i + 1) - max(lo, i)
    return m / scale


_RESAMPLE_CACHE: dict = {}


def area_resample(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample by exact area averaging; equals block means when the size
    ratio is an integer."""
    h, w = image.shape
    key_r, key_c = (h, out_h), (w, out_w)
    if key_r not in _RESAMPLE_CACHE:
        _RESAMPLE_CACHE[key_r] = _resample_matrix(h, out_h)
    if key_c not in _RESAMPLE_CACHE:
        _RESAMPLE_CACHE[key_c] = _resample_matrix(w, out_w)
    return _RESAMPLE_CACHE[key_r] @ image @ _RESAMPLE_CACHE[key_c].T


def build_state_features(working_image: np.ndarray, c, patch_size: int,
                         feature_size: int = 32) -> np.ndarray:
    """Two-channel observation: the whole image and the current patch,
    each area-resampled to feature_size x feature_size."""
    from .classifier import patch_slices

    d = feature_size
    si, sj = patch_slices(c, patch_size)
    return np.stack([
        area_resample(working_image, d, d),
        area_resample(working_image[si, sj], d, d),
    ])


# ---------------------------------------------------------------------------
# acting


def policy_forward(policy: PolicyModel, features: np.ndarray):
    """Batched forward pass; returns (logits (N,4), values (N,), caches)."""
    z, cache_t = nn.forward(policy.trunk, features)
    logits, cache_p = nn.forward(policy.policy_head, z)
    values, cache_v = nn.forward(policy.value_head, z)
    return logits, values[:, 0], (cache_t, cache_p, cache_v)


def act(policy: PolicyModel, state_features: np.ndarray, rng):
    """Sample an action from the categorical policy.

    Returns (action index, log probability of that action, state value).
    """
    logits, values, _ = policy_forward(policy, state_features[None])
    if not np.all(np.isfinite(logits)):
        raise ValueError("policy produced non-finite logits")
    log_probs = nn.log_softmax(logits[0])
    action = int(rng.choice(4, p=np.exp(log_probs)))
    return action, float(log_probs[action]), float(values[0])


# ---------------------------------------------------------------------------
# returns and advantages


def compute_returns_advantages(trajectory: Trajectory, gamma: float,
                               gae_lambda: float, normalize: bool = True):
    """Discounted returns and GAE advantages for one episode.

    returns_t = sum_k gamma^k R_{t+k} plus a discounted bootstrap value at
    truncation (terminated episodes bootstrap with 0). Advantages follow
    GAE(lambda); with normalize=True they are standardized when the
    episode has at least two steps and nonzero spread. ppo_update
    normalizes across its whole batch instead.
    """
    length = len(trajectory)
    if length == 0:
        raise ValueError("empty trajectory")
    rewards = trajectory.rewards
    values = trajectory.values
    bootstrap = 0.0 if trajectory.terminated else trajectory.bootstrap_value

    returns = np.empty(length)
    advantages = np.empty(length)
    next_return = bootstrap
    next_value = bootstrap
    gae = 0.0
    for t in range(length - 1, -1, -1):
        next_return = rewards[t] + gamma * next_return
        returns[t] = next_return
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * gae_lambda * gae
        advantages[t] = gae
        next_value = values[t]
    if normalize and length >= 2:
        std = advantages.std()
        if std > 0:
            advantages = (advantages - advantages.mean()) / (std + 1e-8)
    return returns, advantages


def clipped_surrogate(ratio, advantage, clip_eps: float):
    """Per-sample PPO objective min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage,
                      np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


# ---------------------------------------------------------------------------
# updates


def _assemble_batch(trajectories, config: PPOConfig):
    feats, actions, log_probs, returns, advantages = [], [], [], [], []
    for traj in trajectories:
        if any(f is None for f in traj.features):
            raise ValueError("trajectory lacks policy features; collect with "
                             "a PolicyModel agent")
        ret, adv = compute_returns_advantages(traj, config.gamma,
                                              config.gae_lambda,
                                              normalize=False)
        feats.extend(traj.features)
        actions.append(traj.actions)
        log_probs.append(traj.log_probs)
        returns.append(ret)
        advantages.append(adv)
    features = np.stack(feats)
    actions = np.concatenate(actions)
    log_probs = np.concatenate(log_probs)
    returns = np.concatenate(returns)
    advantages = np.concatenate(advantages)
    std = advantages.std()
    advantages = (advantages - advantages.mean()) / (std + 1e-8)
    return features, actions, log_probs, returns, advantages


def ppo_update(policy: PolicyModel, trajectories, config: PPOConfig, rng,
               optimizer: nn.AdamState | None = None):
    """One PPO update over a batch of whole trajectories.

    Returns (policy, stats, optimizer). The policy and optimizer are
    mutated in place; on a non-finite loss both are restored to their
    entry state and PPOUpdateError is raised.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    params = policy.parameters()
    if optimizer is None:
        optimizer = nn.init_adam(params, lr=config.lr)
    features, actions, log_probs_old, returns, advantages = _assemble_batch(
        trajectories, config)
    n = len(actions)
    # scale the value gradient by the return variance so the conv trunk,
    # shared between both heads, sees policy and value gradients of
    # comparable size (raw returns span ~100 because of the terminal
    # bonus, and an unscaled MSE gradient swamps the direction signal);
    # floored at 1 so a converged run with concentrated returns does not
    # blow the gradient back up
    return_var = max(float(returns.var()), 1.0)

    snapshot = policy.copy_params()
    adam_snapshot = (optimizer.t,
                     {k: v.copy() for k, v in optimizer.m.items()},
                     {k: v.copy() for k, v in optimizer.v.items()})

    stats = {"policy_loss": [], "value_loss": [], "entropy": [],
             "mean_ratio": []}
    eps = config.clip_eps
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            m = len(idx)
            x = features[idx]
            a = actions[idx]
            adv = advantages[idx]
            ret = returns[idx]
            lp_old = log_probs_old[idx]

            logits, values, caches = policy_forward(policy, x)
            cache_t, cache_p, cache_v = caches
            log_all = nn.log_softmax(logits)
            probs = np.exp(log_all)
            lp_new = log_all[np.arange(m), a]
            ratio = np.exp(lp_new - lp_old)

            surr1 = ratio * adv
            surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
            surrogate = np.minimum(surr1, surr2)
            policy_loss = -float(np.mean(surrogate))
            value_err = values - ret
            value_loss = float(np.mean(value_err ** 2))
            entropy_each = -np.sum(probs * log_all, axis=1)
            entropy = float(np.mean(entropy_each))
            total = (policy_loss + config.value_coef * value_loss
                     - config.entropy_coef * entropy)
            if not np.isfinite(total):
                policy.set_params(snapshot)
                optimizer.t = adam_snapshot[0]
                for k in optimizer.m:
                    optimizer.m[k][...] = adam_snapshot[1][k]
                    optimizer.v[k][...] = adam_snapshot[2][k]
                raise PPOUpdateError("non-finite PPO loss; update aborted")

            # gradient through the surrogate flows only where the unclipped
            # branch is the active minimum
            unclipped_active = surr1 <= surr2
            g = np.where(unclipped_active, adv * ratio, 0.0)
            dlogits = (-g / m)[:, None] * (
                np.eye(4)[a] - probs)
            # entropy bonus: dH/dlogits = -p * (log p + H)
            dlogits += (config.entropy_coef / m) * probs * (
                log_all + entropy_each[:, None])
            dvalues = (2.0 * config.value_coef / (m * return_var)) * value_err

            grads_p, dz_p = nn.backward(policy.policy_head, cache_p, dlogits)
            grads_v, dz_v = nn.backward(policy.value_head, cache_v,
                                        dvalues[:, None])
            grads_t, _ = nn.backward(policy.trunk, cache_t, dz_p + dz_v)

            merged = {f"trunk:{k}": v for k, v in grads_t.items()}
            merged.update({f"policy_head:{k}": v for k, v in grads_p.items()})
            merged.update({f"value_head:{k}": v for k, v in grads_v.items()})
            nn.adam_step(params, merged, optimizer)

            stats["policy_loss"].append(policy_loss)
            stats["value_loss"].append(value_loss)
            stats["entropy"].append(entropy)
            stats["mean_ratio"].append(float(np.mean(ratio)))
    summary = {k: float(np.mean(v)) for k, v in stats.items()}
    return policy, summary, optimizer


def ppo_loss(policy: PolicyModel, features, actions, log_probs_old, returns,
             advantages, config: PPOConfig, return_var: float = 1.0) -> float:
    """Scalar PPO loss for gradient checking; mirrors ppo_update exactly
    (including the return-variance scaling of the value term)."""
    logits, values, _ = policy_forward(policy, features)
    log_all = nn.log_softmax(logits)
    probs = np.exp(log_all)
    lp_new = log_all[np.arange(len(actions)), actions]
    ratio = np.exp(lp_new - log_probs_old)
    surrogate = clipped_surrogate(ratio, advantages, config.clip_eps)
    entropy = float(np.mean(-np.sum(probs * log_all, axis=1)))
    value_term = float(np.mean((values - returns) ** 2)) / return_var
    return (-float(np.mean(surrogate)) + config.value_coef * value_term
            - config.entropy_coef * entropy)


# ---------------------------------------------------------------------------
# training loop


def train(dataset, classifier, env_config, ppo_config: PPOConfig, seed: int,
          policy_config: PolicyConfig | None = None, checkpoint_dir=None,
          log_path=None) -> PolicyModel:
    """Algorithm: sample an image, run M episodes with accumulating noise
    masks, buffer transitions, and update once the buffer reaches the
    batch size; stop at convergence (moving-average termination rate) or
    max_updates. Fully deterministic in `seed`; the training log lands in
    policy.training_log and optionally in log_path as CSV.
    """
    if policy_config is None:
        policy_config = PolicyConfig()
    policy = init_policy(policy_config, seed=mix_seed(seed, 1))
    if ppo_config.max_updates == 0:
        return policy

    rng_master = np.random.default_rng(mix_seed(seed, 2))
    update_rng = np.random.default_rng(mix_seed(seed, 3))
    optimizer = None
    buffer: list[Trajectory] = []
    buffered_steps = 0
    episode_counter = 0
    termination_counter = 0
    updates = 0
    noise_violations = 0
    first_episode_outcomes = []  # fresh-image episodes only (m == 0)
    recent_rates = []

    while updates < ppo_config.max_updates:
        image_idx = int(rng_master.integers(len(dataset)))
        phantom = dataset[image_idx]
        working = phantom.image.copy()
        centroid = centroid_for(phantom, env_config)
        # ground-truth oracles carry one mask per image and bind here
        bind = getattr(classifier, "for_phantom", None)
        image_classifier = bind(phantom) if bind is not None else classifier
        for m in range(ppo_config.episodes_per_image):
            traj = run_episode(phantom, policy, image_classifier, env_config,
                               seed=mix_seed(seed, 0x10000 + episode_counter),
                               working_image=working, centroid=centroid,
                               episode_index=m, start_mode="random")
            episode_counter += 1
            buffer.append(traj)
            buffered_steps += len(traj)
            if m == 0:
                first_episode_outcomes.append(traj.terminated)
            if traj.terminated:
                termination_counter += 1
                if not traj.noise_ok:
                    noise_violations += 1
        if buffered_steps < ppo_config.batch_size:
            continue

        # rate over all buffered episodes is capped by noise masking (late
        # episodes on a heavily masked image must truncate), so convergence
        # tracks only each image's first, mask-free episode
        term_rate = float(np.mean([t.terminated for t in buffer]))
        first_rate = float(np.mean(first_episode_outcomes))
        first_episode_outcomes = []
        mean_return = float(np.mean([t.rewards.sum() for t in buffer]))
        frac = updates / max(1, ppo_config.max_updates - 1)
        overrides = {}
        if ppo_config.entropy_coef_final is not None:
            overrides["entropy_coef"] = (
                ppo_config.entropy_coef * (1.0 - frac)
                + ppo_config.entropy_coef_final * frac)
        if ppo_config.lr_final is not None:
            overrides["lr"] = (ppo_config.lr * (1.0 - frac)
                               + ppo_config.lr_final * frac)
        step_config = (replace(ppo_config, **overrides) if overrides
                       else ppo_config)
        if optimizer is not None:
            optimizer.lr = step_config.lr
        policy, stats, optimizer = ppo_update(policy, buffer, step_config,
                                              update_rng, optimizer)
        updates += 1
        buffer = []
        buffered_steps = 0
        recent_rates.append(first_rate)
        if len(recent_rates) > ppo_config.convergence_window:
            recent_rates.pop(0)
        row = {"update": updates, "episodes": episode_counter,
               "terminations": termination_counter,
               "termination_rate": term_rate,
               "first_episode_rate": first_rate,
               "mean_return": mean_return,
               "noise_violations": noise_violations, **stats}
        policy.training_log.append(row)
        if checkpoint_dir and updates % ppo_config.checkpoint_every == 0:
            save_policy(os.path.join(checkpoint_dir,
                                     f"policy_{updates:04d}.ckpt"),
                        policy, meta={"update": updates})
        if (len(recent_rates) == ppo_config.convergence_window
                and float(np.mean(recent_rates))
                >= ppo_config.target_termination_rate):
            break

    if checkpoint_dir:
        save_policy(os.path.join(checkpoint_dir, "policy_final.ckpt"), policy,
                    meta={"update": updates})
    if log_path:
        write_training_log(log_path, policy.training_log)
    return policy


def write_training_log(path, rows) -> None:
    fields = ["update", "episodes", "terminations", "termination_rate",
              "first_episode_rate", "mean_return", "noise_violations",
              "policy_loss", "value_loss", "entropy", "mean_ratio"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fields})


# ---------------------------------------------------------------------------
# persistence


def save_policy(path, policy: PolicyModel, meta: dict | None = None) -> None:
    info = {"policy_config": asdict(policy.config)}
    info.update(meta or {})
    nn.save_checkpoint(path, policy._nets(), meta=info)


def load_policy(path) -> PolicyModel:
    nets, meta = nn.load_checkpoint(path)
    cfg_dict = dict(meta["policy_config"])
    cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
    config = PolicyConfig(**cfg_dict)
    return PolicyModel(trunk=nets["trunk"], policy_head=nets["policy_head"],
                       value_head=nets["value_head"], config=config)
