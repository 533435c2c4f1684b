"""Command-line pipeline: data generation, pre-training, fine-tuning,
forecasting/surprise/planning evaluation, and artifact inspection.

Configuration is a flat key=value text file ('#' comments); unknown keys
are rejected. Every run logs the fully resolved config to stderr, seeds
all randomness from --seed, and writes only under --out-dir.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import actions as actions_mod
from . import envs as envs_mod
from . import planner as planner_mod
from . import probes as probes_mod
from . import rollout as rollout_mod
from . import sources as sources_mod
from . import training as training_mod
from .data import SamplerSpec, read_feature_file, write_feature_file
from .encoder import EncoderSpec, ToyEncoder
from .predictor import PredictorConfig, init_predictor

log = logging.getLogger("lwm")


# -- configuration --------------------------------------------------------------


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _fraction(x):
    return 0 < x < 1


# key -> (type, default, validator, description of the valid range)
CONFIG_KEYS = {
    "sampler.frames": (int, 4, lambda v: v >= 2, ">= 2"),
    "sampler.delta_min": (float, 0.1, _positive, "> 0"),
    "sampler.delta_max": (float, 0.5, _positive, "> 0"),
    "encoder.patch": (int, 8, _positive, "> 0"),
    "encoder.dim": (int, 32, _positive, "> 0"),
    "encoder.seed": (int, 0, lambda v: v >= 0, ">= 0"),
    "encoder.normalize": (bool, True, lambda v: True, "bool"),
    "predictor.model_dim": (int, 64, _positive, "> 0"),
    "predictor.blocks": (int, 2, _positive, "> 0"),
    "predictor.heads": (int, 2, _positive, "> 0"),
    "predictor.mlp_ratio": (float, 4.0, _positive, "> 0"),
    "train.batch_size": (int, 16, _positive, "> 0"),
    "train.steps": (int, 2000, _non_negative, ">= 0"),
    "train.warmup": (int, 100, _non_negative, ">= 0"),
    "train.lr": (float, 1e-3, _positive, "> 0"),
    "train.weight_decay": (float, 0.4, _non_negative, ">= 0"),
    "train.checkpoint_every": (int, 1000, _positive, "> 0"),
    "finetune.epochs": (int, 25, _positive, "> 0"),
    "finetune.clip_frames": (int, 4, lambda v: v >= 2, ">= 2"),
    "finetune.window_stride": (int, 5, _positive, "> 0"),
    "finetune.holdout": (float, 0.1, _fraction, "in (0, 1)"),
    "env.kind": (str, "wall", lambda v: v in ("wall", "pointmaze"), "wall|pointmaze"),
    "env.resolution": (int, 64, _positive, "> 0"),
    "plan.population": (int, 300, _positive, "> 0"),
    "plan.horizon": (int, 25, _positive, "> 0"),
    "plan.frameskip": (int, 5, _positive, "> 0"),
    "plan.executed": (int, 25, _positive, "> 0"),
    "plan.elites": (int, 10, _positive, "> 0"),
    "plan.iterations": (int, 30, _positive, "> 0"),
    "probe.stride": (int, 3, _positive, "> 0"),
    "probe.target": (int, 19, _positive, "> 0"),
    "probe.steps": (int, 2000, _positive, "> 0"),
    "probe.lr": (float, 1e-2, _positive, "> 0"),
    "surprise.context": (int, 4, _positive, "> 0"),
    "surprise.aggregator": (str, "max", lambda v: v in ("max", "mean"), "max|mean"),
}


class Config:
    """Typed view over the flat key=value namespace."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def sampler_spec(self) -> SamplerSpec:
        return SamplerSpec(
            self["sampler.frames"], self["sampler.delta_min"], self["sampler.delta_max"]
        )

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            self["encoder.patch"],
            self["encoder.dim"],
            self["encoder.seed"],
            self["encoder.normalize"],
        )

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(
            input_dim=self["encoder.dim"],
            model_dim=self["predictor.model_dim"],
            num_blocks=self["predictor.blocks"],
            num_heads=self["predictor.heads"],
            mlp_ratio=self["predictor.mlp_ratio"],
        )

    def train_config(self, seed: int) -> training_mod.TrainConfig:
        return training_mod.TrainConfig(
            batch_size=self["train.batch_size"],
            total_steps=self["train.steps"],
            warmup_steps=self["train.warmup"],
            base_lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            seed=seed,
            sampler=self.sampler_spec(),
            resolution=self["env.resolution"],
            checkpoint_every=self["train.checkpoint_every"],
        )

    def env_spec(self) -> envs_mod.EnvSpec:
        return envs_mod.EnvSpec(
            kind=self["env.kind"], resolution=self["env.resolution"]
        )

    def plan_params(self) -> planner_mod.PlanParams:
        return planner_mod.PlanParams(
            population=self["plan.population"],
            horizon=self["plan.horizon"],
            frameskip=self["plan.frameskip"],
            executed=self["plan.executed"],
            elites=self["plan.elites"],
            iterations=self["plan.iterations"],
        )

    def finetune_config(self, seed: int) -> actions_mod.FinetuneConfig:
        return actions_mod.FinetuneConfig(
            epochs=self["finetune.epochs"],
            clip_frames=self["finetune.clip_frames"],
            frameskip=self["plan.frameskip"],
            window_stride=self["finetune.window_stride"],
            holdout_fraction=self["finetune.holdout"],
            train=self.train_config(seed),
        )

    def echo(self) -> dict[str, str]:
        return {k: str(v) for k, v in self.values.items()}


def _parse_value(key: str, raw: str, line_no: int):
    typ, _, validator, desc = CONFIG_KEYS[key]
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                value = True
            elif raw.lower() in ("false", "0", "no"):
                value = False
            else:
                raise ValueError
        else:
            value = typ(raw)
    except ValueError:
        raise ValueError(
            f"line {line_no}: key {key!r} expects {typ.__name__}, got {raw!r}"
        ) from None
    if not validator(value):
        raise ValueError(f"line {line_no}: key {key!r} out of range (expected {desc})")
    return value


def parse_config(path: str | Path | None) -> Config:
    """Load a Config; missing path uses defaults only."""
    values = {k: default for k, (_, default, _, _) in CONFIG_KEYS.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        for line_no, line in enumerate(p.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"line {line_no}: expected key=value, got {line!r}")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"line {line_no}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw, line_no)
    cfg = Config(values)
    if cfg["sampler.delta_min"] > cfg["sampler.delta_max"]:
        raise ValueError("sampler.delta_min exceeds sampler.delta_max")
    return cfg


# -- checkpoint <-> model plumbing ----------------------------------------------


def model_from_checkpoint(ckpt: training_mod.Checkpoint):
    """Rebuild the (possibly conditioned) predictor a checkpoint stores."""
    echo = ckpt.config
    pcfg = PredictorConfig(
        input_dim=int(echo["encoder.dim"]),
        model_dim=int(echo["predictor.model_dim"]),
        num_blocks=int(echo["predictor.blocks"]),
        num_heads=int(echo["predictor.heads"]),
        mlp_ratio=float(echo["predictor.mlp_ratio"]),
    )
    conditioned = any(k.startswith("action.") for k in ckpt.tensors)
    if conditioned:
        base = init_predictor(pcfg, 0)
        model = actions_mod.attach_action_blocks(base, int(echo["action_dim"]))
    else:
        model = init_predictor(pcfg, 0)
    training_mod.restore(model, None, ckpt)
    return model


def encoder_from_echo(echo: dict[str, str]) -> ToyEncoder:
    return ToyEncoder(
        EncoderSpec(
            int(echo["encoder.patch"]),
            int(echo["encoder.dim"]),
            int(echo["encoder.seed"]),
            echo.get("encoder.normalize", "True") in ("True", "true", "1"),
        )
    )


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    spec = replace(cfg.env_spec(), kind=args.env or cfg["env.kind"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = envs_mod.generate_trajectories(spec, args.count, args.length, args.seed)
    path = out / f"{spec.kind}-data.lwmt"
    envs_mod.write_trajectories(ds, path)
    log.info("wrote %d trajectories of %d frames to %s", args.count, args.length, path)
    print(path)
    return 0


def _load_source(data_path: Path, cfg: Config, encoder: ToyEncoder):
    if data_path.is_dir():
        return sources_mod.source_from_feature_dir(data_path, cfg.sampler_spec())
    ds = envs_mod.read_trajectories(data_path)
    return sources_mod.source_from_trajectories(ds, encoder, cfg.sampler_spec())


def cmd_pretrain(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    encoder = ToyEncoder(cfg.encoder_spec())
    source = _load_source(Path(args.data), cfg, encoder)
    tcfg = cfg.train_config(args.seed)
    ckpt = training_mod.pretrain(
        source, cfg.predictor_config(), tcfg, args.out_dir, cfg.echo(), log=log
    )
    log.info("pretrain finished at step %d", ckpt.step)
    print(Path(args.out_dir) / "ckpt.lwmc")
    return 0


def cmd_finetune(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    mode = actions_mod.FinetuneMode.parse(args.mode)
    ds = envs_mod.read_trajectories(args.data)
    base_ckpt = training_mod.read_checkpoint(args.base)
    base = model_from_checkpoint(base_ckpt)
    if isinstance(base, actions_mod.ConditionedPredictor):
        raise ValueError("--base must be an unconditional checkpoint")
    encoder = encoder_from_echo(base_ckpt.config)
    fcfg = cfg.finetune_config(args.seed)
    model, history = actions_mod.finetune(base, ds.trajectories, encoder, mode, fcfg, log=log)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(base_ckpt.config)
    echo["action_dim"] = str(model.action_dim)
    echo["finetune.mode"] = mode.value
    path = out / f"finetuned-{mode.value}.lwmc"
    training_mod.write_checkpoint(
        training_mod.Checkpoint(training_mod.model_to_tensors(model), history["steps"], echo),
        path,
    )
    log.info(
        "finetune %s: held-out loss %.5f -> %.5f",
        mode.value,
        history["heldout_initial"],
        history["heldout_final"],
    )
    print(path)
    return 0


def _forecast_samples(ds, encoder, protocol, holdout_fraction=0.5, max_samples=128, seed=0):
    """Split trajectories, train-head frames from one half, eval samples
    from the other."""
    idx_train, idx_eval = actions_mod.split_trajectories(
        len(ds.trajectories), holdout_fraction, seed
    )
    head_frames, head_labels = [], []
    for i in idx_train:
        traj = ds.trajectories[i]
        states = envs_mod.replay_states(ds.spec, traj.init_state, traj.actions)
        grid = encoder.encode_frames(np.stack(traj.clip.frames), traj.clip.timestamps)
        for t in range(0, traj.clip.num_frames, 7):
            head_frames.append(grid.data[t])
            head_labels.append(
                probes_mod.patch_labels(
                    envs_mod.render_class_map(ds.spec, states[t]), encoder.spec.patch_size
                )
            )
    samples = []
    for i in idx_eval:
        traj = ds.trajectories[i]
        if traj.clip.num_frames < protocol.min_frames:
            continue
        states = envs_mod.replay_states(ds.spec, traj.init_state, traj.actions)
        grid = encoder.encode_frames(np.stack(traj.clip.frames), traj.clip.timestamps)
        labels = probes_mod.patch_labels(
            envs_mod.render_class_map(ds.spec, states[protocol.target_index]),
            encoder.spec.patch_size,
        )
        samples.append((grid, labels))
        if len(samples) >= max_samples:
            break
    return head_frames, head_labels, samples


def cmd_eval_forecast(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    ckpt = training_mod.read_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if isinstance(model, actions_mod.ConditionedPredictor):
        model = model.base
    encoder = encoder_from_echo(ckpt.config)
    ds = envs_mod.read_trajectories(args.data)
    protocol = probes_mod.ForecastProtocol(cfg["probe.stride"], cfg["probe.target"])
    head_frames, head_labels, samples = _forecast_samples(
        ds, encoder, protocol, seed=args.seed
    )
    head = probes_mod.train_linear_head(
        head_frames, head_labels, num_classes=4, steps=cfg["probe.steps"], lr=cfg["probe.lr"]
    )
    if head.missing_classes:
        log.warning("classes missing from head training: %s", head.missing_classes)
    scores = probes_mod.run_forecast_protocol(model, head, samples, protocol)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "forecast.csv"
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["protocol", "present", "short", "mid", "copy_last"])
        writer.writerow(
            ["short", f"{scores['present']:.4f}", f"{scores['short']:.4f}", "",
             f"{scores['copy_last_short']:.4f}"]
        )
        writer.writerow(
            ["mid", f"{scores['present']:.4f}", "", f"{scores['mid']:.4f}",
             f"{scores['copy_last_mid']:.4f}"]
        )
    for k in ("present", "short", "mid", "copy_last_short", "copy_last_mid", "skipped"):
        log.info("forecast %s: %s", k, scores[k])
    print(report)
    return 0


def make_surprise_pairs(spec, encoder, count, frames, seed, out_dir):
    """Render smooth/teleport episode pairs, encode them, and write LWMF
    files plus a manifest CSV."""
    out_dir = Path(out_dir)
    pair_dir = out_dir / "pairs"
    pair_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "pairs.csv"
    rows = []
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 77, k]))
        state = envs_mod.env_reset(spec, rng)
        acts = rng.uniform(-spec.max_force, spec.max_force, size=(frames - 1, 2))
        states = envs_mod.replay_states(spec, state.to_vector(), acts)
        jump_at = int(rng.integers(frames // 2, frames - 1))
        tele_states = states[:jump_at]
        tele = states[jump_at]
        far = envs_mod.sample_free_position(spec, rng)
        tele = replace(tele, pos=far)
        tele_states.append(tele)
        for a in acts[jump_at:]:
            tele = envs_mod.env_step(spec, tele, a)
            tele_states.append(tele)
        ts = np.arange(frames, dtype=np.float64) * spec.frame_dt
        smooth_grid = encoder.encode_frames(
            np.stack([envs_mod.env_render(spec, s) for s in states]), ts
        )
        tele_grid = encoder.encode_frames(
            np.stack([envs_mod.env_render(spec, s) for s in tele_states]), ts
        )
        p_path = pair_dir / f"smooth-{k:04d}.lwmf"
        i_path = pair_dir / f"teleport-{k:04d}.lwmf"
        write_feature_file(smooth_grid, p_path)
        write_feature_file(tele_grid, i_path)
        rows.append((str(p_path), str(i_path), "teleport"))
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["plausible_path", "implausible_path", "category"])
        writer.writerows(rows)
    return manifest


def cmd_eval_surprise(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    ckpt = training_mod.read_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if isinstance(model, actions_mod.ConditionedPredictor):
        model = model.base
    encoder = encoder_from_echo(ckpt.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = args.manifest
    if manifest is None:
        spec = replace(cfg.env_spec(), kind=args.env or cfg["env.kind"])
        manifest = make_surprise_pairs(
            spec, encoder, args.pairs, args.pair_frames, args.seed, out
        )
        log.info("generated %d pairs under %s", args.pairs, out)
    by_category: dict[str, list] = {}
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            plaus = rollout_mod.surprise_trace(
                model, read_feature_file(row["plausible_path"]), cfg["surprise.context"]
            )
            implaus = rollout_mod.surprise_trace(
                model, read_feature_file(row["implausible_path"]), cfg["surprise.context"]
            )
            by_category.setdefault(row["category"], []).append((plaus, implaus))
    report = out / "surprise.csv"
    agg = cfg["surprise.aggregator"]
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["category", "pairs", "relative_accuracy"])
        all_pairs = []
        for cat, pairs in sorted(by_category.items()):
            acc = rollout_mod.relative_accuracy(pairs, agg)
            writer.writerow([cat, len(pairs), f"{acc:.4f}"])
            all_pairs.extend(pairs)
        overall = rollout_mod.relative_accuracy(all_pairs, agg)
        writer.writerow(["overall", len(all_pairs), f"{overall:.4f}"])
    log.info("surprise relative accuracy: %.4f over %d pairs", overall, len(all_pairs))
    print(report)
    return 0


def cmd_plan(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    ckpt = training_mod.read_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if not isinstance(model, actions_mod.ConditionedPredictor):
        raise ValueError("planning needs an action-conditioned checkpoint")
    encoder = encoder_from_echo(ckpt.config)
    spec = replace(cfg.env_spec(), kind=args.env or cfg["env.kind"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rate = planner_mod.evaluate_planning(
        spec,
        model,
        encoder,
        cfg.plan_params(),
        episodes=args.episodes,
        seed=args.seed,
        csv_path=out / "plan_log.csv",
        workers=args.workers,
    )
    log.info("planning success rate: %.4f over %d episodes", rate, args.episodes)
    print(f"{rate:.4f}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == training_mod.LWMC_MAGIC:
        ckpt = training_mod.read_checkpoint(path)
        model_params = 0
        for name, arr in sorted(ckpt.tensors.items()):
            print(f"{name}  {'x'.join(map(str, arr.shape))}")
            if not name.startswith("opt."):
                model_params += arr.size
        print(f"step: {ckpt.step}")
        print(f"model parameters: {model_params}")
        for k, v in sorted(ckpt.config.items()):
            print(f"config {k}={v}")
    elif magic == b"LWMF":
        grid = read_feature_file(path)
        t, h, w, d = grid.shape
        print(f"feature grid {t}x{h}x{w}x{d}, "
              f"t in [{grid.timestamps[0]:.3f}, {grid.timestamps[-1]:.3f}] s")
    elif magic == envs_mod.LWMT_MAGIC:
        ds = envs_mod.read_trajectories(path)
        lens = [t.clip.num_frames for t in ds.trajectories]
        print(f"{len(ds.trajectories)} trajectories, frames per trajectory "
              f"{min(lens)}..{max(lens)}, env {ds.spec.kind}, seed {ds.seed}")
    else:
        raise ValueError(f"unrecognized file magic {magic!r}")
    return 0


# -- entry point ----------------------------------------------------------------


def _log_config(cfg: Config) -> None:
    for k in sorted(cfg.values):
        log.info("config %s=%s", k, cfg.values[k])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="lwm-out")
        p.add_argument("--workers", type=int, default=1)
        if data:
            p.add_argument("--data", required=True, help="LWMT file or LWMF directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="LWMC checkpoint")

    p = sub.add_parser("gen-data", help="generate offline trajectories")
    common(p)
    p.add_argument("--env", choices=["wall", "pointmaze"], default=None)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--len", dest="length", type=int, default=50)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(p, data=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="action-conditioned fine-tuning")
    common(p, data=True)
    p.add_argument("--base", required=True, help="pre-trained LWMC checkpoint")
    p.add_argument("--mode", required=True, choices=["scratch", "action-only", "full"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-forecast", help="dense forecasting protocol")
    common(p, data=True, ckpt=True)
    p.set_defaults(func=cmd_eval_forecast)

    p = sub.add_parser("eval-surprise", help="plausibility via surprise")
    common(p, ckpt=True)
    p.add_argument("--manifest", default=None, help="pair manifest CSV")
    p.add_argument("--env", choices=["wall", "pointmaze"], default=None)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--pair-frames", type=int, default=12)
    p.set_defaults(func=cmd_eval_surprise)

    p = sub.add_parser("plan", help="CEM planning evaluation")
    common(p, ckpt=True)
    p.add_argument("--env", choices=["wall", "pointmaze"], default=None)
    p.add_argument("--episodes", type=int, default=64)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("inspect", help="describe an LWMC/LWMF/LWMT file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("LWM_LOG", "INFO").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 2
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single CLI error boundary
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
