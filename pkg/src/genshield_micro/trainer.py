"""Two-stage curriculum training: task sampling, AdamW, EMA, checkpoints.

All recipe defaults (learning rate, warmup, betas, epsilon, clip norm,
loss weighting, EMA ratios, timestep shift, per-task sampling weights)
live in :class:`TrainingConfig` and can be overridden from a flat JSON
config file. Training is deterministic given (seed, stage): every source
of randomness at step k derives from (seed, stage, k).
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn, objectives
from .dataset import (
    CorrectionTuple,
    DetectionSample,
    TASKS,
    TrainSample,
    assemble,
    grid_from_manifest,
    load_correction,
    load_detection,
    load_manifest,
)
from .errors import CheckpointError, ConfigError, NumericsError
from .model import (
    ModelConfig,
    forward_packed,
    init_params,
    pack_batch,
    text_logits_at,
    velocity_at,
)

CHECKPOINT_MAGIC = b"GSHD"
CHECKPOINT_VERSION = 1

STAGE_SAMPLING = {
    1: {"detect": 1.0, "s1_correct": 5.0, "vcot_initial": 0.0,
        "vcot_intermediate": 0.0, "vcot_terminate": 0.0},
    2: {"detect": 2.0, "s1_correct": 0.0, "vcot_initial": 1.0,
        "vcot_intermediate": 1.0, "vcot_terminate": 0.1},
}
STAGE_EMA = {1: 0.999, 2: 0.990}


@dataclass
class TrainingConfig:
    stage: int = 1
    lr: float = 2e-5
    warmup_steps: int = 500
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-15
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    ema_ratio: float = -1.0          # -1 resolves per stage: 0.999 / 0.990
    loss_lambda: float = 0.25
    timestep_shift: float = 4.0
    batch_size: int = 8
    seed: int = 0
    weight_detect: float = -1.0      # -1 resolves to the stage default
    weight_s1_correct: float = -1.0
    weight_vcot_initial: float = -1.0
    weight_vcot_intermediate: float = -1.0
    weight_vcot_terminate: float = -1.0
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 160
    dtype: str = "float32"
    checkpoint_every: int = 0        # 0 = final checkpoint only
    log_every: int = 1

    def resolved_ema_ratio(self) -> float:
        return STAGE_EMA[self.stage] if self.ema_ratio < 0 else self.ema_ratio

    def sampling_weights(self) -> dict[str, float]:
        base = dict(STAGE_SAMPLING[self.stage])
        overrides = {
            "detect": self.weight_detect,
            "s1_correct": self.weight_s1_correct,
            "vcot_initial": self.weight_vcot_initial,
            "vcot_intermediate": self.weight_vcot_intermediate,
            "vcot_terminate": self.weight_vcot_terminate,
        }
        for task, w in overrides.items():
            if w >= 0:
                base[task] = w
        if sum(base.values()) <= 0:
            raise ConfigError("all task sampling weights are zero")
        return base

    def model_config(self, grid) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            grid=grid, max_len=self.max_len, timestep_shift=self.timestep_shift,
            dtype=self.dtype,
        )


def load_training_config(path: str | Path, overrides: dict | None = None) -> TrainingConfig:
    """Flat JSON with exactly the TrainingConfig keys; unknown keys error."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if overrides:
        raw.update(overrides)
    return training_config_from_dict(raw)


def training_config_from_dict(raw: dict) -> TrainingConfig:
    known = {f.name: f.type for f in fields(TrainingConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = TrainingConfig(**raw)
    if cfg.stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {cfg.stage}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    return cfg


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------

def lr_at(step: int, lr: float = 2e-5, warmup_steps: int = 500) -> float:
    """Linear warmup to ``lr`` over ``warmup_steps``, constant afterwards."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, nn.Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (grads, pre-clip norm); grads are returned unchanged when the
    norm is already within bounds.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adamw_step(
    params: dict[str, nn.Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-15,
    weight_decay: float = 0.0,
) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    ratio: float

    @classmethod
    def init(cls, params: dict[str, nn.Tensor], ratio: float) -> "EmaState":
        return cls({k: p.data.copy() for k, p in params.items()}, ratio)

    def update(self, params: dict[str, nn.Tensor]) -> None:
        r = self.ratio
        for k, p in params.items():
            s = self.shadow[k]
            s *= r
            s += (1.0 - r) * p.data


def ema_update(ema: dict[str, np.ndarray], params: dict[str, nn.Tensor], ratio: float) -> None:
    for k, p in params.items():
        ema[k] = ratio * ema[k] + (1.0 - ratio) * p.data


def sample_task(stage: int, rng: np.random.Generator, weights: dict[str, float] | None = None) -> str:
    """Categorical draw over tasks with the stage's sampling weights."""
    w = weights if weights is not None else STAGE_SAMPLING[stage]
    names = [t for t in TASKS if w.get(t, 0.0) > 0.0]
    probs = np.array([w[t] for t in names], dtype=np.float64)
    probs /= probs.sum()
    u = rng.random()
    return names[int(np.searchsorted(np.cumsum(probs), u, side="right"))]


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    params: dict[str, nn.Tensor],
    ema: dict[str, np.ndarray] | None = None,
) -> None:
    """Binary named-tensor format, float32 payload, CRC-terminated."""
    tensors: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    if ema is not None:
        tensors.update({f"ema.{k}": v for k, v in ema.items()})
    payload = bytearray()
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    payload += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        payload += struct.pack("<H", len(nb))
        payload += nb
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read all tensors (float32); EMA tensors keep their 'ema.' prefix."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    payload, crc_stored = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != {CHECKPOINT_VERSION}")
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.copy()
    return tensors


def split_checkpoint(tensors: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    raw = {k: v for k, v in tensors.items() if not k.startswith("ema.")}
    ema = {k[4:]: v for k, v in tensors.items() if k.startswith("ema.")}
    return raw, ema


def params_from_arrays(
    arrays: dict[str, np.ndarray], cfg: ModelConfig
) -> dict[str, nn.Tensor]:
    """Validate a tensor dict against the model layout and wrap as params."""
    expected = init_params(cfg, seed=0)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"missing tensor name {missing[0]!r} in checkpoint")
    out = {}
    for name, ref in expected.items():
        arr = np.asarray(arrays[name], dtype=cfg.np_dtype)
        if arr.shape != ref.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {ref.data.shape}")
        out[name] = nn.Tensor(arr)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TaskPools:
    """Index spaces for each training task over the loaded datasets."""

    def __init__(self, detect: list[DetectionSample], correct: list[CorrectionTuple]):
        self.detect = detect
        self.correct = correct
        self.n_mid = len(correct[0].mid_images) if correct else 0

    def size(self, task: str) -> int:
        if task == "detect":
            return len(self.detect)
        if task == "vcot_intermediate":
            return len(self.correct) * self.n_mid
        return len(self.correct)

    def sample_for(self, task: str, index: int, grid) -> TrainSample:
        if task == "detect":
            return assemble(self.detect[index], task, grid)
        if task == "vcot_intermediate":
            return assemble(self.correct[index // self.n_mid], task, grid,
                            mid_index=index % self.n_mid)
        return assemble(self.correct[index], task, grid)


def build_batch_losses(
    params: dict[str, nn.Tensor],
    mcfg: ModelConfig,
    samples: list[TrainSample],
    z0s: list[np.ndarray] | None,
    ts: np.ndarray | None,
    lam: float,
):
    """Forward a homogeneous batch; returns (combined, fm, ar) Tensors/None."""
    has_gen = samples[0].fm_target is not None
    gen_values = None
    fm_targets = None
    if has_gen:
        gen_values, targets = [], []
        for s, z0, t in zip(samples, z0s, ts):
            zt = objectives.interpolate(s.fm_target, z0, float(t)).z_t
            gen_values.append(zt.reshape(zt.shape[0], -1).T)
            targets.append((s.fm_target - z0).reshape(z0.shape[0], -1).T)
        fm_targets = np.stack(targets).astype(mcfg.np_dtype)
    pk = pack_batch(samples, mcfg, gen_values)
    hidden = forward_packed(params, mcfg, pk, ts if has_gen else None)

    fm = None
    if has_gen:
        vel = velocity_at(params, mcfg, hidden, pk)
        fm = nn.mean_(nn.square(nn.sub(vel, fm_targets)))
    ar = None
    if pk.ar_pred_rows.size:
        logits = text_logits_at(params, hidden, pk.ar_pred_rows)
        ar = objectives.ar_loss(logits, pk.ar_targets,
                                np.ones(len(pk.ar_targets), dtype=bool))
    if fm is not None and ar is not None:
        return objectives.combined_loss(fm, ar, lam), fm, ar
    return (fm if fm is not None else ar), fm, ar


def train_step(
    params, mcfg: ModelConfig, cfg: TrainingConfig, pools: TaskPools,
    opt: OptimizerState, ema: EmaState, step: int, weights: dict[str, float],
) -> dict:
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0x7EA1, cfg.stage, step]))
    task = sample_task(cfg.stage, rng, weights)
    n_pool = pools.size(task)
    if n_pool == 0:
        raise ConfigError(f"task {task!r} sampled but its dataset is empty")
    idxs = rng.integers(0, n_pool, size=cfg.batch_size)
    samples = [pools.sample_for(task, int(i), mcfg.grid) for i in idxs]

    has_gen = samples[0].fm_target is not None
    z0s = ts = None
    if has_gen:
        z0s = [rng.standard_normal(s.fm_target.shape) for s in samples]
        ts = np.array([objectives.sample_timestep(rng, cfg.timestep_shift)
                       for _ in samples])

    with nn.Tape() as tape:
        loss, fm, ar = build_batch_losses(params, mcfg, samples, z0s, ts, cfg.loss_lambda)
    grads = nn.param_grads(tape.backward(loss), params)
    grads, norm = clip_grad_norm(grads, cfg.clip_norm)
    lr = lr_at(step, cfg.lr, cfg.warmup_steps)
    adamw_step(params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    ema.update(params)
    return {
        "step": step,
        "task": task,
        "loss_fm": float(fm.data) if fm is not None else float("nan"),
        "loss_ar": float(ar.data) if ar is not None else float("nan"),
        "loss": float(loss.data),
        "lr": lr,
        "grad_norm": norm,
    }


def run_stage(
    data_dir: str | Path,
    out_dir: str | Path,
    cfg: TrainingConfig,
    init: dict[str, np.ndarray] | None = None,
    threads: int = 1,
) -> Path:
    """Run one curriculum stage; returns the final checkpoint path.

    ``init`` supplies starting weights (raw tensors from a stage-1
    checkpoint); stage 2 refuses to run without it.
    """
    if cfg.stage == 2 and init is None:
        raise ConfigError("stage 2 requires a stage-1 checkpoint (--init)")
    # more BLAS threads than cores thrashes badly on the tiny matmuls here
    threads = max(1, min(threads, os.cpu_count() or 1))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    grid = grid_from_manifest(manifest)
    mcfg = cfg.model_config(grid)

    detect = load_detection(Path(data_dir) / "train_detect.jsonl")
    correct = load_correction(Path(data_dir) / "train_correct.jsonl")
    pools = TaskPools(detect, correct)
    weights = cfg.sampling_weights()

    if init is not None:
        params = params_from_arrays(init, mcfg)
    else:
        params = init_params(mcfg, seed=cfg.seed)
    opt = OptimizerState.init(params)
    ema = EmaState.init(params, cfg.resolved_ema_ratio())

    log_path = out / "train_log.csv"
    final_path = out / f"checkpoint_stage{cfg.stage}_final.gshd"
    with threadpool_limits(limits=threads), open(log_path, "w", encoding="utf-8") as log:
        log.write("step,task,loss_fm,loss_ar,loss,lr,grad_norm\n")
        for step in range(cfg.total_steps):
            row = train_step(params, mcfg, cfg, pools, opt, ema, step, weights)
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                log.write("{step},{task},{loss_fm!r},{loss_ar!r},{loss!r},{lr!r},{grad_norm!r}\n"
                          .format(**row))
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                    and step + 1 < cfg.total_steps:
                save_checkpoint(out / f"checkpoint_stage{cfg.stage}_step{step + 1}.gshd",
                                params, ema.shadow)
    save_checkpoint(final_path, params, ema.shadow)
    return final_path
