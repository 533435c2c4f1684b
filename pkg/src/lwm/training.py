"""Optimization loop, LR schedule, and LWMC checkpoint format.

Checkpoints carry model tensors, AdamW moments (``opt.*`` names), and a
``__config__`` echo so an interrupted run resumes bit-exactly: batches are
generated statelessly from (seed, step), so step k of a resumed run sees
the same data as step k of an uninterrupted one.

LWMC layout (little-endian):
    magic "LWMC" | u32 version=1 | u64 step | u32 tensor count |
    per tensor: u16 name length | UTF-8 name | u8 ndims | u32 dims... | f32 data
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .binio import check_dims, expect_magic, expect_version, read_exact
from .data import LatentGrid, SamplerSpec
from .predictor import Predictor, PredictorConfig, init_predictor, smooth_l1

LWMC_MAGIC = b"LWMC"
LWMC_VERSION = 1
CONFIG_TENSOR = "__config__"

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; the desk-scale defaults run on CPU."""

    batch_size: int = 16
    total_steps: int = 2000
    warmup_steps: int = 100
    base_lr: float = 1e-4
    weight_decay: float = 0.4
    seed: int = 0
    sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec(4, 0.1, 0.5))
    resolution: int = 64
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.warmup_steps > self.total_steps and self.total_steps > 0:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_at_step(step: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp from zero over the warmup, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled decay on matrix weights only; norms, biases,
    and the query embedding are exempt."""
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.requires_grad and p.ndim < 2]
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.base_lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )


def _batch_tensors(batch: list[LatentGrid], dtype) -> tuple[torch.Tensor, np.ndarray]:
    feats = torch.tensor(np.stack([g.data for g in batch]), dtype=dtype)
    ts = np.stack([g.timestamps for g in batch])
    return feats, ts


def train_step(
    model: Predictor,
    batch: list[LatentGrid],
    opt: torch.optim.AdamW,
    cfg: TrainConfig,
    step: int,
    clip_ids: list[str] | None = None,
) -> float:
    """One teacher-forced AdamW update on a batch of clips. Returns the loss.

    Aborts with a diagnostic naming the offending clip if the loss is not
    finite.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    lr = lr_at_step(step, cfg.warmup_steps, cfg.base_lr)
    for group in opt.param_groups:
        group["lr"] = lr
    feats, ts = _batch_tensors(batch, next(model.parameters()).dtype)
    preds = model.train_predictions(feats, ts)
    targets = feats[:, 1:]
    loss = smooth_l1(preds, targets)
    if not torch.isfinite(loss):
        per_clip = [float(smooth_l1(preds[i], targets[i])) for i in range(len(batch))]
        bad = next(i for i, v in enumerate(per_clip) if not np.isfinite(v))
        name = clip_ids[bad] if clip_ids else f"batch index {bad}"
        raise RuntimeError(f"non-finite loss at step {step}, offending clip: {name}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named f32 tensor map plus step counter and config echo."""

    tensors: dict[str, np.ndarray]
    step: int
    config: dict[str, str]


def _config_to_tensor(config: dict[str, str]) -> np.ndarray:
    text = "\n".join(f"{k}={v}" for k, v in sorted(config.items()))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _config_from_tensor(arr: np.ndarray) -> dict[str, str]:
    text = bytes(arr.astype(np.uint8)).decode("utf-8")
    out = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = dict(ckpt.tensors)
    if len(entries) != len(ckpt.tensors):
        raise ValueError("duplicate tensor names")
    if ckpt.config:
        entries[CONFIG_TENSOR] = _config_to_tensor(ckpt.config)
    tmp = Path(path).with_suffix(".tmp")
    with open(tmp, "wb") as f:
        f.write(LWMC_MAGIC)
        f.write(struct.pack("<IQI", LWMC_VERSION, ckpt.step, len(entries)))
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        expect_magic(f, LWMC_MAGIC)
        expect_version(f, LWMC_VERSION, "LWMC")
        step, count = struct.unpack("<QI", read_exact(f, 12, "header"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", read_exact(f, 2, "name length"))
            name = read_exact(f, name_len, "name").decode("utf-8")
            (ndims,) = struct.unpack("<B", read_exact(f, 1, "ndims"))
            dims = struct.unpack(f"<{ndims}I", read_exact(f, 4 * ndims, "dims"))
            nbytes = check_dims(dims, itemsize=4) if dims else 4
            data = np.frombuffer(read_exact(f, nbytes, f"tensor {name}"), dtype="<f4")
            if name in tensors:
                raise ValueError(f"duplicate tensor name {name!r}")
            tensors[name] = data.reshape(dims)
    config = {}
    if CONFIG_TENSOR in tensors:
        config = _config_from_tensor(tensors.pop(CONFIG_TENSOR))
    return Checkpoint(tensors, step, config)


def model_to_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.state_dict().items()
    }


def tensors_to_model(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Load tensors by name; mismatched name sets raise with the full diff."""
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, extra {extra}")
    for name, p in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(
                f"tensor {name!r} has shape {arr.shape}, model expects {tuple(p.shape)}"
            )
    with torch.no_grad():
        for name, p in state.items():
            p.copy_(torch.tensor(tensors[name], dtype=p.dtype))


def optimizer_to_tensors(
    opt: torch.optim.AdamW, named_params: list[tuple[str, torch.nn.Parameter]]
) -> dict[str, np.ndarray]:
    """Serialize Adam moments as opt.m.* / opt.v.* plus a shared step count."""
    out: dict[str, np.ndarray] = {}
    steps = set()
    for name, p in named_params:
        state = opt.state.get(p)
        if not state:
            continue
        out[f"opt.m.{name}"] = state["exp_avg"].numpy().astype(np.float32)
        out[f"opt.v.{name}"] = state["exp_avg_sq"].numpy().astype(np.float32)
        steps.add(float(state["step"]))
    if out:
        if len(steps) != 1:
            raise ValueError(f"inconsistent optimizer step counts: {sorted(steps)}")
        out["opt.step"] = np.array([steps.pop()], dtype=np.float32)
    return out


def tensors_to_optimizer(
    opt: torch.optim.AdamW,
    named_params: list[tuple[str, torch.nn.Parameter]],
    tensors: dict[str, np.ndarray],
) -> None:
    if "opt.step" not in tensors:
        return
    step = torch.tensor(float(tensors["opt.step"][0]))
    for name, p in named_params:
        opt.state[p] = {
            "step": step.clone(),
            "exp_avg": torch.tensor(tensors[f"opt.m.{name}"], dtype=p.dtype),
            "exp_avg_sq": torch.tensor(tensors[f"opt.v.{name}"], dtype=p.dtype),
        }


def _trainable_named_params(model: torch.nn.Module) -> list[tuple[str, torch.nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def snapshot(model: torch.nn.Module, opt, step: int, config: dict[str, str]) -> Checkpoint:
    tensors = model_to_tensors(model)
    if opt is not None:
        tensors.update(optimizer_to_tensors(opt, _trainable_named_params(model)))
    return Checkpoint(tensors, step, config)


def restore(model: torch.nn.Module, opt, ckpt: Checkpoint) -> int:
    """Load model (and optimizer, if given) from a checkpoint; returns step."""
    model_tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    tensors_to_model(model, model_tensors)
    if opt is not None:
        tensors_to_optimizer(opt, _trainable_named_params(model), ckpt.tensors)
    return ckpt.step


# -- pre-training driver ------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step RNG; makes resumed runs see identical batches."""
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def pretrain(
    source,
    predictor_cfg: PredictorConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    config_echo: dict[str, str] | None = None,
    log=None,
) -> Checkpoint:
    """Self-supervised pre-training over clips drawn from ``source``.

    ``source.sample_clip(rng)`` must yield a LatentGrid with
    ``cfg.sampler.num_frames`` frames. Writes ckpt.lwmc and train_log.csv
    under out_dir; resumes automatically from an existing ckpt.lwmc.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "ckpt.lwmc"
    log_path = out_dir / "train_log.csv"
    echo = dict(config_echo or {})
    echo.setdefault("adam.beta1", str(ADAM_BETAS[0]))
    echo.setdefault("adam.beta2", str(ADAM_BETAS[1]))
    echo.setdefault("adam.eps", str(ADAM_EPS))

    model = init_predictor(predictor_cfg, cfg.seed)
    opt = make_optimizer(model, cfg)
    start = 0
    if ckpt_path.exists():
        start = restore(model, opt, read_checkpoint(ckpt_path))
        if log is not None:
            log.info("resuming from %s at step %d", ckpt_path, start)

    mode = "a" if start > 0 and log_path.exists() else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.writer(logf)
        if mode == "w":
            writer.writerow(["step", "loss", "lr"])
        for step in range(start, cfg.total_steps):
            rng = step_rng(cfg.seed, step)
            batch = [source.sample_clip(rng) for _ in range(cfg.batch_size)]
            loss = train_step(model, batch, opt, cfg, step)
            writer.writerow([step, f"{loss:.8f}", f"{lr_at_step(step, cfg.warmup_steps, cfg.base_lr):.3e}"])
            if log is not None and (step % 100 == 0 or step + 1 == cfg.total_steps):
                log.info("step %d loss %.5f", step, loss)
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                write_checkpoint(snapshot(model, opt, done, echo), ckpt_path)
    if cfg.total_steps == 0 or not ckpt_path.exists():
        write_checkpoint(snapshot(model, opt, start, echo), ckpt_path)
    return read_checkpoint(ckpt_path)
