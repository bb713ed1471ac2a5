"""Command-line pipeline: gen-data, train-classifier, train-rl, segment, evaluate.

All commands are driven by one JSON config with sections phantom,
classifier, env, ppo, boundary and eval plus a global seed and output
directory. Every command writes its artifacts plus a run-metadata JSON
(config hash, seed, content hashes of the inputs it consumed), so a run
can be reproduced from the config and seed alone.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, boundary, classifier as clsmod, evalkit, phantom, ppo
from .env import EnvConfig
from .seeds import mix_seed


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "phantom": {"count": 64},
    "classifier": {"patch_count": 6000, "balance": 0.5, "epochs": 8},
    "env": {},
    "ppo": {},
    "boundary": {},
    "eval": {"count": 20, "stride": 4},
}

_SECTION_KEYS = {
    "phantom": set(f.name for f in dataclasses.fields(phantom.PhantomConfig))
    | {"count"},
    "classifier": set(f.name for f in dataclasses.fields(
        clsmod.ClassifierTrainConfig)) - {"seed"} | {"patch_count", "balance"},
    "env": set(f.name for f in dataclasses.fields(EnvConfig)),
    "ppo": (set(f.name for f in dataclasses.fields(ppo.PPOConfig))
            | set(f.name for f in dataclasses.fields(ppo.PolicyConfig))),
    "boundary": set(f.name for f in dataclasses.fields(boundary.BoundaryConfig)),
    "eval": {"count", "stride"},
}


@dataclasses.dataclass
class RunConfig:
    seed: int
    out_dir: str
    phantom_config: phantom.PhantomConfig
    phantom_count: int
    classifier_train: clsmod.ClassifierTrainConfig
    patch_count: int
    patch_balance: float
    env_config: EnvConfig
    ppo_config: ppo.PPOConfig
    policy_config: ppo.PolicyConfig
    boundary_config: boundary.BoundaryConfig
    eval_count: int
    eval_stride: int
    raw: dict


def load_config(path=None, seed_override=None, out_override=None) -> RunConfig:
    """Parse and validate the JSON config; unknown sections or keys are
    rejected so typos fail loudly."""
    raw = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            user = json.load(f)
        known_top = set(DEFAULT_CONFIG)
        unknown = set(user) - known_top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, value in user.items():
            if name in ("seed", "out_dir"):
                raw[name] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be an object")
            bad = set(value) - _SECTION_KEYS[name]
            if bad:
                raise ConfigError(
                    f"unknown keys in section {name!r}: {sorted(bad)}")
            raw[name].update(value)
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_override is not None:
        raw["out_dir"] = out_override
    elif os.environ.get("BOUNDARY_RL_OUT"):
        raw["out_dir"] = os.environ["BOUNDARY_RL_OUT"]

    ph_kwargs = {k: v for k, v in raw["phantom"].items() if k != "count"}
    cls_kwargs = {k: v for k, v in raw["classifier"].items()
                  if k not in ("patch_count", "balance")}
    ppo_fields = set(f.name for f in dataclasses.fields(ppo.PPOConfig))
    pol_fields = set(f.name for f in dataclasses.fields(ppo.PolicyConfig))
    ppo_kwargs = {k: v for k, v in raw["ppo"].items() if k in ppo_fields}
    pol_kwargs = {k: v for k, v in raw["ppo"].items() if k in pol_fields}
    if "conv_channels" in pol_kwargs:
        pol_kwargs["conv_channels"] = tuple(pol_kwargs["conv_channels"])
    bnd_kwargs = dict(raw["boundary"])
    return RunConfig(
        seed=int(raw["seed"]),
        out_dir=raw["out_dir"],
        phantom_config=phantom.PhantomConfig(**ph_kwargs),
        phantom_count=int(raw["phantom"].get("count", 64)),
        classifier_train=clsmod.ClassifierTrainConfig(
            seed=mix_seed(int(raw["seed"]), 0xC1), **cls_kwargs),
        patch_count=int(raw["classifier"].get("patch_count", 6000)),
        patch_balance=float(raw["classifier"].get("balance", 0.5)),
        env_config=EnvConfig(**raw["env"]),
        ppo_config=ppo.PPOConfig(**ppo_kwargs),
        policy_config=ppo.PolicyConfig(**pol_kwargs),
        boundary_config=boundary.BoundaryConfig(**bnd_kwargs),
        eval_count=int(raw["eval"].get("count", 20)),
        eval_stride=int(raw["eval"].get("stride", 4)),
        raw=raw,
    )


# ---------------------------------------------------------------------------
# artifact bookkeeping


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path) -> str:
    with open(path, "rb") as f:
        return _sha256_bytes(f.read())


def _config_hash(config: RunConfig) -> str:
    return _sha256_bytes(json.dumps(config.raw, sort_keys=True).encode())


def _write_run_metadata(directory, command, config, inputs, outputs) -> None:
    meta = {
        "command": command,
        "package_version": __version__,
        "seed": config.seed,
        "config": config.raw,
        "config_sha256": _config_hash(config),
        "inputs": {p: _sha256_file(p) for p in sorted(inputs)},
        "outputs": sorted(os.path.relpath(p, directory) for p in outputs),
    }
    with open(os.path.join(directory, "run.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def _paths(config: RunConfig) -> dict:
    out = config.out_dir
    return {
        "data": os.path.join(out, "data"),
        "eval_data": os.path.join(out, "eval_data"),
        "classifier_dir": os.path.join(out, "classifier"),
        "classifier": os.path.join(out, "classifier", "classifier.ckpt"),
        "policy_dir": os.path.join(out, "policy"),
        "policy": os.path.join(out, "policy", "policy_final.ckpt"),
        "segment": os.path.join(out, "segment"),
        "eval": os.path.join(out, "eval"),
    }


def _gen_one(args):
    directory, stem, cfg, seed = args
    p = phantom.generate_phantom(cfg, seed)
    return phantom.save_phantom(p, directory, stem)


def _generate_to(directory, count, cfg, seed, jobs) -> list:
    os.makedirs(directory, exist_ok=True)
    tasks = [(directory, f"ph{k:04d}", cfg, mix_seed(seed, k))
             for k in range(count)]
    if jobs > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_gen_one, tasks))
    else:
        results = [_gen_one(t) for t in tasks]
    return [path for group in results for path in group]


def _load_dataset(directory) -> list:
    if not os.path.isdir(directory):
        raise PrerequisiteError(
            f"dataset directory {directory} missing; run gen-data first")
    stems = sorted(f[: -len("_image.pgm")] for f in os.listdir(directory)
                   if f.endswith("_image.pgm"))
    if not stems:
        raise PrerequisiteError(
            f"no phantoms found in {directory}; run gen-data first")
    return [phantom.load_phantom(directory, stem) for stem in stems]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: RunConfig, jobs: int) -> int:
    paths = _paths(config)
    written = _generate_to(paths["data"], config.phantom_count,
                           config.phantom_config, mix_seed(config.seed, 0xDA7A),
                           jobs)
    manifest = {
        "count": config.phantom_count,
        "seed": config.seed,
        "phantom_config": dataclasses.asdict(config.phantom_config),
        "files": {os.path.basename(p): _sha256_file(p) for p in sorted(written)},
    }
    manifest_path = os.path.join(paths["data"], "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    _write_run_metadata(paths["data"], "gen-data", config, [],
                        written + [manifest_path])
    print(f"wrote {config.phantom_count} phantoms to {paths['data']}")
    return 0


def cmd_train_classifier(config: RunConfig) -> int:
    paths = _paths(config)
    dataset = _load_dataset(paths["data"])
    samples = clsmod.extract_patches(
        dataset, config.patch_count, config.env_config.patch_size,
        balance=config.patch_balance, seed=mix_seed(config.seed, 0xFA7C))
    model = clsmod.train_classifier(samples, config.classifier_train)
    os.makedirs(paths["classifier_dir"], exist_ok=True)
    clsmod.save_classifier(paths["classifier"], model)
    log_path = os.path.join(paths["classifier_dir"], "training_log.csv")
    with open(log_path, "w") as f:
        f.write("epoch,train_bce,holdout_bce,holdout_acc\n")
        for row in model.training_log:
            f.write(f"{row['epoch']},{row['train_bce']},"
                    f"{row['holdout_bce']},{row['holdout_acc']}\n")
    inputs = [os.path.join(paths["data"], "manifest.json")]
    _write_run_metadata(paths["classifier_dir"], "train-classifier", config,
                        inputs, [paths["classifier"], log_path])
    final = model.training_log[-1]
    print(f"classifier saved to {paths['classifier']} "
          f"(holdout acc {final['holdout_acc']:.3f})")
    return 0


def cmd_train_rl(config: RunConfig) -> int:
    paths = _paths(config)
    if not os.path.exists(paths["classifier"]):
        raise PrerequisiteError(
            "classifier checkpoint missing: train classifier first")
    dataset = _load_dataset(paths["data"])
    model = clsmod.load_classifier(paths["classifier"])
    os.makedirs(paths["policy_dir"], exist_ok=True)
    log_path = os.path.join(paths["policy_dir"], "training_log.csv")
    policy = ppo.train(dataset, model, config.env_config, config.ppo_config,
                       seed=mix_seed(config.seed, 0x9901),
                       policy_config=config.policy_config,
                       checkpoint_dir=paths["policy_dir"], log_path=log_path)
    inputs = [paths["classifier"],
              os.path.join(paths["data"], "manifest.json")]
    _write_run_metadata(paths["policy_dir"], "train-rl", config, inputs,
                        [paths["policy"], log_path])
    last = policy.training_log[-1] if policy.training_log else {}
    print(f"policy saved to {paths['policy']} after "
          f"{last.get('update', 0)} updates "
          f"(termination rate {last.get('termination_rate', float('nan')):.3f})")
    return 0


def _draw_overlay(image, polygon, kept, rejected):
    rgb = np.stack([np.round(image * 255).astype(np.uint8)] * 3, axis=-1)
    h, w = image.shape

    def put(i, j, color):
        if 0 <= i < h and 0 <= j < w:
            rgb[int(i), int(j)] = color

    closed = np.vstack([polygon, polygon[:1]])
    for a, b in zip(closed[:-1], closed[1:]):
        steps = int(max(abs(b[0] - a[0]), abs(b[1] - a[1])) * 2) + 1
        for t in np.linspace(0.0, 1.0, steps):
            pt = a + t * (b - a)
            put(round(pt[0]), round(pt[1]), (255, 64, 64))
    for i, j in kept:
        put(i, j, (64, 255, 64))
    for i, j in rejected:
        put(i, j, (255, 160, 0))
    return rgb


def _save_ppm(rgb, path) -> None:
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.astype(np.uint8).tobytes())


def cmd_segment(config: RunConfig, image_path: str) -> int:
    paths = _paths(config)
    for need, hint in ((paths["classifier"], "train classifier first"),
                       (paths["policy"], "train RL policy first")):
        if not os.path.exists(need):
            raise PrerequisiteError(f"{need} missing: {hint}")
    model = clsmod.load_classifier(paths["classifier"])
    policy = ppo.load_policy(paths["policy"])
    image = phantom.load_pgm(image_path)
    result = boundary.segment_with_details(
        image, policy, model, config.env_config, config.boundary_config,
        seed=mix_seed(config.seed, 0x5E67))
    os.makedirs(paths["segment"], exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    mask_path = os.path.join(paths["segment"], f"{stem}_mask.pgm")
    overlay_path = os.path.join(paths["segment"], f"{stem}_overlay.ppm")
    points_path = os.path.join(paths["segment"], f"{stem}_points.json")
    phantom.save_pgm(result.mask, mask_path)
    _save_ppm(_draw_overlay(image, result.polygon,
                            result.point_set.kept_points,
                            result.point_set.rejected_points), overlay_path)
    with open(points_path, "w") as f:
        json.dump({
            "raw_points": [list(p) for p in result.point_set.raw_points],
            "kept_points": [list(p) for p in result.point_set.kept_points],
            "rejected_points": [list(p)
                                for p in result.point_set.rejected_points],
            "polygon": result.polygon.tolist(),
            "episodes_run": result.episodes_run,
            "episodes_terminated": result.episodes_terminated,
        }, f, indent=2)
    _write_run_metadata(paths["segment"], "segment", config,
                        [image_path, paths["classifier"], paths["policy"]],
                        [mask_path, overlay_path, points_path])
    print(f"mask written to {mask_path}")
    return 0


def _segment_phantom(policy, model, env_config, bnd_config, seed, p):
    return boundary.segment(p.image, policy, model, env_config, bnd_config,
                            seed)


def cmd_evaluate(config: RunConfig, jobs: int) -> int:
    paths = _paths(config)
    for need, hint in ((paths["classifier"], "train classifier first"),
                       (paths["policy"], "train RL policy first")):
        if not os.path.exists(need):
            raise PrerequisiteError(f"{need} missing: {hint}")
    model = clsmod.load_classifier(paths["classifier"])
    policy = ppo.load_policy(paths["policy"])
    eval_seed = mix_seed(config.seed, 0xE7A1)
    _generate_to(paths["eval_data"], config.eval_count,
                 config.phantom_config, eval_seed, jobs)
    dataset = _load_dataset(paths["eval_data"])

    seg_args = [(policy, model, config.env_config, config.boundary_config,
                 mix_seed(eval_seed, 0x300 + k), p)
                for k, p in enumerate(dataset)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            brl_masks = list(pool.map(_segment_star, seg_args))
    else:
        brl_masks = [_segment_star(a) for a in seg_args]
    mils_masks = [evalkit.sliding_window_segment(p.image, model,
                                                 config.eval_stride)
                  for p in dataset]

    by_index = {id(p): k for k, p in enumerate(dataset)}
    methods = [
        ("boundary_rl", lambda p: brl_masks[by_index[id(p)]]),
        ("sliding_window", lambda p: mils_masks[by_index[id(p)]]),
    ]
    reports, tests = evalkit.evaluate(dataset, methods, out_dir=paths["eval"])
    inputs = [paths["classifier"], paths["policy"]]
    outputs = [os.path.join(paths["eval"], n)
               for n in ("results.csv", "summary.csv", "tests.csv")]
    _write_run_metadata(paths["eval"], "evaluate", config, inputs, outputs)
    for report in reports:
        print(f"{report.method}: dice {report.mean:.3f} +- {report.std:.3f}")
    return 0


def _segment_star(args):
    return _segment_phantom(*args)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boundary-rl",
        description="Weakly-supervised boundary delineation pipeline")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory "
                        "(or set BOUNDARY_RL_OUT)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for data generation and "
                        "evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate the phantom training set")
    sub.add_parser("train-classifier", help="train the presence classifier")
    sub.add_parser("train-rl", help="train the boundary controller with PPO")
    seg = sub.add_parser("segment", help="delineate one image")
    seg.add_argument("image", help="input PGM image")
    sub.add_parser("evaluate", help="score methods on a held-out set")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed,
                             out_override=args.out)
        if args.command == "gen-data":
            return cmd_gen_data(config, args.jobs)
        if args.command == "train-classifier":
            return cmd_train_classifier(config)
        if args.command == "train-rl":
            return cmd_train_rl(config)
        if args.command == "segment":
            return cmd_segment(config, args.image)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.jobs)
        raise ValueError(f"unhandled command {args.command}")
    except (ConfigError, PrerequisiteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
