"""Training loops, AdamW, LR schedule, and binary checkpoints.

Every source of randomness in a run (batch choice, crops, masks, drop-path)
draws from one Generator in a fixed order, and checkpoints carry its exact
state: resuming replays the bit-identical trajectory of an uninterrupted
run, and identical config + seed reproduces identical checkpoint bytes.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentConfig, ImageBatch, make_batch, normalize_target, patchify
from .masking import MaskConfig, sample_block_mask
from .model import ModelConfig, ModelParams, decode, encode, init_params
from .objective import distill_loss, init_projection, masked_pixel_loss
from .tensor import Graph, NonFiniteError

CKPT_MAGIC = b"BMCK"
CKPT_VERSION = 1


class PipelineError(RuntimeError):
    pass


class TrainingHalted(PipelineError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class OptimConfig:
    peak_lr: float = 8e-4
    warmup_steps: int = 1000
    total_steps: int = 10_000
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 128
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise PipelineError(
                f"warmup {self.warmup_steps} must be < total {self.total_steps}"
            )
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise PipelineError(f"beta {b} outside (0, 1)")
        if self.batch_size < 1:
            raise PipelineError("batch_size must be positive")


def lr_schedule(step, cfg: OptimConfig):
    """Linear warmup 0 -> peak, then cosine decay peak -> 0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise PipelineError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def decay_allowed(name, tensor):
    """Decoupled weight decay applies to matrix-shaped weights only; norms,
    biases, class/mask tokens, and positional tables are exempt."""
    if tensor.data.ndim < 2:
        return False
    return name not in ("cls_tokens", "enc_pos", "dec_pos")


class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m = {}
        self.v = {}

    def ensure(self, name, shape, dtype=np.float32):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=dtype)
            self.v[name] = np.zeros(shape, dtype=dtype)


def adamw_step(params, state: AdamWState, cfg: OptimConfig, step, eps=1e-8):
    """One AdamW update over every parameter that has a gradient.

    step is 0-indexed; bias correction uses t = step + 1. Any non-finite
    gradient aborts before touching parameters or moments.
    """
    lr = lr_schedule(step, cfg)
    items = [(n, p) for n, p in params.items() if p.grad is not None]
    for name, p in items:
        if not np.all(np.isfinite(p.grad)):
            raise PipelineError(f"non-finite gradient in {name}; step {step} aborted")
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in items:
        state.ensure(name, p.data.shape, p.data.dtype)
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if cfg.weight_decay and decay_allowed(name, p):
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update.astype(p.data.dtype)
    return lr


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: ModelParams
    opt_state: AdamWState
    step: int
    rng_state: dict
    extra: dict = field(default_factory=dict)


def _rng_state_to_json(state):
    def convert(obj):
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, np.integer):
            return int(obj)
        return obj

    return convert(state)


def save_checkpoint(path, model_cfg, params, opt_state=None, step=0,
                    rng_state=None, extra=None):
    """Binary layout: magic, version, u64 header length, JSON header
    (config, step, rng state, tensor directory), then contiguous f32 LE
    blobs in directory order."""
    tensors = list(params.items())
    if opt_state is not None:
        for name in sorted(opt_state.m):
            tensors.append((f"opt.m.{name}", _ArrayView(opt_state.m[name])))
            tensors.append((f"opt.v.{name}", _ArrayView(opt_state.v[name])))
    directory = []
    offset = 0
    for name, t in tensors:
        arr = t.data
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "version": CKPT_VERSION,
        "config": asdict(model_cfg),
        "step": int(step),
        "rng_state": _rng_state_to_json(rng_state) if rng_state else None,
        "extra": extra or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return path


class _ArrayView:
    """Adapter so plain arrays ride the same save path as parameters."""

    def __init__(self, arr):
        self.data = arr


def load_checkpoint(path, expect_cfg=None):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise PipelineError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise PipelineError(f"{path}: unsupported checkpoint version {version}")
    hlen, = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    cfg = ModelConfig(**header["config"])
    if expect_cfg is not None and asdict(expect_cfg) != header["config"]:
        raise PipelineError(
            f"{path}: checkpoint config does not match the expected architecture"
        )
    params = ModelParams()
    opt_state = AdamWState()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + size * 4
        if end > len(raw):
            raise PipelineError(f"{path}: tensor {entry['name']} exceeds file size")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape).copy()
        name = entry["name"]
        if name.startswith("opt.m."):
            opt_state.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_state.v[name[6:]] = arr
        else:
            params.add(name, arr)
    return Checkpoint(model_cfg=cfg, params=params, opt_state=opt_state,
                      step=header["step"], rng_state=header["rng_state"],
                      extra=header.get("extra", {}))


def write_metrics(path, rows):
    """Newline-delimited `step<TAB>loss<TAB>lr`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for step, loss, lr in rows:
            f.write(f"{step}\t{loss:.8f}\t{lr:.10f}\n")
    return path


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    params: ModelParams
    metrics: list
    checkpoint: Path


def _restore_rng(rng_state):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = rng_state
    return rng


def pretrain(ids, images, model_cfg: ModelConfig, mask_cfg: MaskConfig,
             optim_cfg: OptimConfig, aug_cfg: AugmentConfig = None, seed=0,
             out_dir=None, ckpt_every=0, normalize_targets=True,
             resume_from=None, extra=None):
    """Masked-reconstruction pre-training over a decoded corpus.

    Per step: sample a batch with replacement, augment, patchify, mask,
    encode visible tokens, decode all positions, regress masked pixels,
    AdamW update. Returns params, per-step metrics, and the final
    checkpoint path (when out_dir is given).
    """
    if aug_cfg is None:
        aug_cfg = AugmentConfig(output_size=model_cfg.input_size)
    if aug_cfg.output_size != model_cfg.input_size:
        raise PipelineError("augmentation output size must match model input size")
    if mask_cfg.grid_h != model_cfg.grid or mask_cfg.grid_w != model_cfg.grid:
        raise PipelineError("mask grid must match the model patch grid")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_cfg=model_cfg)
        params, opt_state = ckpt.params, ckpt.opt_state
        rng = _restore_rng(ckpt.rng_state)
        start_step = ckpt.step
    else:
        rng = np.random.default_rng(seed)
        params = init_params(model_cfg, rng)
        opt_state = AdamWState()
        start_step = 0

    n = len(images)
    expected_seq = model_cfg.n_cls + mask_cfg.n_visible
    metrics = []
    last_good = None

    def checkpoint_at(step_done, tag):
        if not out_dir:
            return None
        return save_checkpoint(
            out_dir / f"ckpt_{tag}.bin", model_cfg, params, opt_state,
            step=step_done, rng_state=rng.bit_generator.state, extra=extra)

    for step in range(start_step, optim_cfg.total_steps):
        idx = rng.choice(n, size=optim_cfg.batch_size, replace=True)
        batch = make_batch(images, ids, idx, aug_cfg, rng)
        plan = sample_block_mask(mask_cfg, rng, batch=optim_cfg.batch_size)
        tokens = patchify(batch.data, model_cfg.p)
        if normalize_targets:
            target, _, _ = normalize_target(tokens)
        else:
            target = tokens
        try:
            with Graph() as g:
                latent = encode(batch, plan, model_cfg, params,
                                rng=rng, training=True)
                if latent.seq_len != expected_seq:
                    raise PipelineError(
                        f"encoder saw {latent.seq_len} tokens, expected {expected_seq}"
                    )
                pred = decode(latent, plan, model_cfg, params,
                              rng=rng, training=True)
                report = masked_pixel_loss(pred, target, plan)
            loss_val = report.total.item()
            if not np.isfinite(loss_val):
                raise NonFiniteError(f"loss {loss_val} at step {step}")
            g.backward(report.total)
        except NonFiniteError as exc:
            raise TrainingHalted(
                f"non-finite values at step {step}: {exc}; "
                f"last good checkpoint: {last_good}", last_good) from exc
        if optim_cfg.grad_clip > 0:
            clip_gradients(params, optim_cfg.grad_clip)
        lr = adamw_step(params, opt_state, optim_cfg, step)
        params.zero_grads()
        metrics.append((step, loss_val, lr))
        if ckpt_every and (step + 1) % ckpt_every == 0:
            last_good = checkpoint_at(step + 1, f"step{step + 1:06d}")

    final = checkpoint_at(optim_cfg.total_steps, "final")
    if out_dir:
        write_metrics(out_dir / "metrics.tsv", metrics)
    return RunResult(params=params, metrics=metrics, checkpoint=final)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

@dataclass
class DistillResult:
    params: ModelParams
    projection: ModelParams
    metrics: list
    checkpoint: Path


def copy_params(params):
    out = ModelParams()
    for name, t in params.items():
        out.add(name, t.data.copy())
    return out


def distill(teacher_cfg, teacher_params, student_cfg, ids, images,
            optim_cfg: OptimConfig, mask_cfg: MaskConfig = None,
            aug_cfg: AugmentConfig = None, seed=0, out_dir=None,
            init_from_teacher=False, extra=None):
    """Train a student to match frozen teacher token features.

    The teacher always sees the unmasked batch; the student sees masked
    input when mask_cfg is given (the teacher's patch tokens are compared
    at the student's visible positions), unmasked otherwise.
    """
    if teacher_cfg.input_size != student_cfg.input_size:
        raise PipelineError("teacher and student must share input resolution")
    if teacher_cfg.n_cls != student_cfg.n_cls:
        raise PipelineError("teacher and student must agree on class-token count")
    if aug_cfg is None:
        aug_cfg = AugmentConfig(output_size=student_cfg.input_size)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    if init_from_teacher:
        if asdict(student_cfg) != asdict(teacher_cfg):
            raise PipelineError("init_from_teacher requires identical configs")
        student = copy_params(teacher_params)
    else:
        student = init_params(student_cfg, rng)
    projection = init_projection(rng, student_cfg.enc_dim, teacher_cfg.enc_dim)

    trainable = {name: t for name, t in student.items()}
    trainable.update({name: t for name, t in projection.items()})
    trainable_store = _CombinedStore(trainable)

    opt_state = AdamWState()
    n = len(images)
    metrics = []
    last_good = None
    for step in range(optim_cfg.total_steps):
        idx = rng.choice(n, size=optim_cfg.batch_size, replace=True)
        batch = make_batch(images, ids, idx, aug_cfg, rng)
        plan = (sample_block_mask(mask_cfg, rng, batch=optim_cfg.batch_size)
                if mask_cfg is not None else None)
        t_out = encode(batch, None, teacher_cfg, teacher_params)  # frozen, no tape
        try:
            with Graph() as g:
                s_out = encode(batch, plan, student_cfg, student,
                               rng=rng, training=True)
                loss = distill_loss(t_out.cls, t_out.patches, s_out.cls,
                                    s_out.patches, projection, plan=plan)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NonFiniteError(f"loss {loss_val} at step {step}")
            g.backward(loss)
        except NonFiniteError as exc:
            raise TrainingHalted(
                f"non-finite values at step {step}: {exc}", last_good) from exc
        if optim_cfg.grad_clip > 0:
            clip_gradients(trainable_store, optim_cfg.grad_clip)
        lr = adamw_step(trainable_store, opt_state, optim_cfg, step)
        trainable_store.zero_grads()
        metrics.append((step, loss_val, lr))

    final = None
    if out_dir:
        final = save_checkpoint(
            out_dir / "ckpt_student.bin", student_cfg, student, opt_state,
            step=optim_cfg.total_steps, rng_state=rng.bit_generator.state,
            extra=extra)
        save_checkpoint(out_dir / "ckpt_projection.bin", student_cfg, projection,
                        step=optim_cfg.total_steps)
        write_metrics(out_dir / "metrics.tsv", metrics)
    return DistillResult(params=student, projection=projection,
                         metrics=metrics, checkpoint=final)


class _CombinedStore:
    """Dict-backed view exposing the ModelParams iteration surface."""

    def __init__(self, mapping):
        self._store = mapping

    def items(self):
        return self._store.items()

    def zero_grads(self):
        for t in self._store.values():
            t.zero_grad()
