"""Frozen-feature evaluation: k-NN, linear probes, block sweeps, demos.

Probes never touch backbone weights; they consume features extracted from a
frozen model and train only a linear map with the training stack's own
optimizer. Depth regression is per patch (depth maps average-pooled to the
patch grid), classification is per image.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .curation import canonicalize
from .data import denormalize_target, encode_png, normalize_target, patchify, unpatchify
from .masking import MaskConfig, sample_block_mask
from .model import ModelConfig, ModelParams, decode, encode, forward_features
from .pipeline import AdamWState, OptimConfig, adamw_step
from .tensor import Graph, Tensor


class EvalError(ValueError):
    pass


@dataclass
class KnnConfig:
    k: int = 10
    temperature: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise EvalError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise EvalError("temperature must be positive")


@dataclass
class ProbeMetrics:
    task: str
    accuracy: float = None
    rmse: float = None
    delta1: float = None
    block_index: int = None
    relative_depth: float = None
    feature_source: str = None

    def named_values(self):
        out = []
        if self.accuracy is not None:
            out.append(("accuracy", self.accuracy))
        if self.rmse is not None:
            out.append(("rmse", self.rmse))
        if self.delta1 is not None:
            out.append(("delta1", self.delta1))
        return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def l2_normalize(feats, eps=1e-12):
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise EvalError("zero-norm feature row cannot be L2-normalized")
    return feats / norms


def knn_classify(train_feats, train_labels, query_feats, cfg: KnnConfig = None):
    """Cosine top-k vote, neighbors weighted by exp(similarity / temperature)."""
    cfg = cfg or KnnConfig()
    train_labels = np.asarray(train_labels)
    if cfg.k > len(train_labels):
        raise EvalError(f"k={cfg.k} exceeds train set size {len(train_labels)}")
    tn = l2_normalize(train_feats)
    qn = l2_normalize(query_feats)
    sims = qn @ tn.T
    top = np.argpartition(-sims, cfg.k - 1, axis=1)[:, :cfg.k]
    rows = np.arange(len(qn))[:, None]
    weights = np.exp(sims[rows, top] / cfg.temperature)
    classes = np.unique(train_labels)
    votes = np.zeros((len(qn), len(classes)))
    for ci, c in enumerate(classes):
        votes[:, ci] = (weights * (train_labels[top] == c)).sum(axis=1)
    return classes[np.argmax(votes, axis=1)]


def rmse(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def delta1(pred_depth, true_depth, threshold=1.25):
    """Fraction of entries whose depth ratio (either way) is under threshold."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    true = np.asarray(true_depth, dtype=np.float64)
    if pred.shape != true.shape:
        raise EvalError(f"depth shapes differ: {pred.shape} vs {true.shape}")
    if np.any(pred <= 0) or np.any(true <= 0):
        raise EvalError("delta1 requires strictly positive depths")
    ratio = np.maximum(pred / true, true / pred)
    return float(np.mean(ratio < threshold))


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

FEATURE_SOURCES = ("cls-mean", "patch-concat-cls")


def _canonical_batch(images, size):
    return np.stack([canonicalize(img, size) for img in images])


def extract_features(images, cfg: ModelConfig, params, source="cls-mean",
                     block_index=None, batch_size=64):
    """Global per-image features from a frozen model, [n, F] float32."""
    if source not in FEATURE_SOURCES:
        raise EvalError(f"unknown feature source {source!r}")
    out = []
    for start in range(0, len(images), batch_size):
        batch = _canonical_batch(images[start:start + batch_size], cfg.input_size)
        tokens = forward_features(batch, cfg, params, block_index=block_index)
        cls_mean = tokens.cls.data.mean(axis=1)
        if source == "cls-mean":
            out.append(cls_mean)
        else:
            patch_mean = tokens.patches.data.mean(axis=1)
            out.append(np.concatenate([patch_mean, cls_mean], axis=1))
    return np.concatenate(out, axis=0)


def extract_patch_features(images, cfg: ModelConfig, params, block_index=None,
                           batch_size=64):
    """Per-patch token features, [n, N, D] float32."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = _canonical_batch(images[start:start + batch_size], cfg.input_size)
        tokens = forward_features(batch, cfg, params, block_index=block_index)
        out.append(tokens.patches.data)
    return np.concatenate(out, axis=0)


def patch_depth_targets(depths, p):
    """Average-pool [n, S, S] depth maps to the patch grid -> [n, N]."""
    depths = np.asarray(depths, dtype=np.float32)
    n, h, w = depths.shape
    if h % p or w % p:
        raise EvalError(f"depth resolution {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    pooled = depths.reshape(n, gh, p, gw, p).mean(axis=(2, 4))
    return pooled.reshape(n, gh * gw)


def params_digest(params):
    """Order-sensitive content hash of every parameter tensor."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def _train_test_split(n, holdout, rng):
    order = rng.permutation(n)
    n_test = max(1, int(round(n * holdout)))
    return order[n_test:], order[:n_test]


def linear_probe(features, targets, task, epochs=100, lr=1e-3, batch_size=32,
                 holdout=0.2, seed=0, depth_floor=1e-9):
    """Train a linear map (+ bias) on frozen features; report held-out metrics.

    task "classify": integer labels, one-hot squared-error training, accuracy
    by argmax. task "regress": scalar targets, rmse plus delta1 (predictions
    floored at depth_floor so the ratio metric stays defined).
    """
    features = np.asarray(features, dtype=np.float32)
    targets = np.asarray(targets)
    if task not in ("classify", "regress"):
        raise EvalError(f"unknown probe task {task!r}")
    if len(features) != len(targets):
        raise EvalError("features and targets differ in length")
    if features.ndim != 2:
        raise EvalError("linear_probe expects flat [n, d] features")

    rng = np.random.default_rng(seed)
    train_idx, test_idx = _train_test_split(len(features), holdout, rng)

    # standardize on train statistics only; constant columns pass through
    mu = features[train_idx].mean(axis=0)
    sd = features[train_idx].std(axis=0)
    sd[sd < 1e-8] = 1.0
    x = (features - mu) / sd

    if task == "classify":
        classes = np.unique(targets)
        if len(classes) < 2:
            raise EvalError("classification probe needs at least two classes")
        if len(np.unique(targets[train_idx])) < 2:
            raise EvalError("train split collapsed to a single class")
        y = (targets[:, None] == classes[None, :]).astype(np.float32)
        out_dim = len(classes)
    else:
        y = np.asarray(targets, dtype=np.float32)
        if y.ndim == 1:
            y = y[:, None]
        out_dim = y.shape[1]

    d = x.shape[1]
    head = ModelParams()
    head.add("probe.w", rng.normal(0.0, 0.01, size=(d, out_dim)))
    head.add("probe.b", np.zeros(out_dim))

    n_train = len(train_idx)
    steps_per_epoch = max(1, int(np.ceil(n_train / batch_size)))
    total = epochs * steps_per_epoch
    optim = OptimConfig(peak_lr=lr, warmup_steps=max(1, total // 20),
                        total_steps=total, weight_decay=0.0,
                        batch_size=batch_size)
    state = AdamWState()
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for s in range(steps_per_epoch):
            rows = train_idx[order[s * batch_size:(s + 1) * batch_size]]
            if len(rows) == 0:
                continue
            with Graph() as g:
                pred = ops.linear(Tensor(x[rows]), head["probe.w"], head["probe.b"])
                loss = ops.mse(pred, y[rows])
            g.backward(loss)
            adamw_step(head, state, optim, step)
            head.zero_grads()
            step += 1

    pred_test = x[test_idx] @ head["probe.w"].data + head["probe.b"].data
    if task == "classify":
        acc = float(np.mean(classes[np.argmax(pred_test, axis=1)]
                            == targets[test_idx]))
        return ProbeMetrics(task="classify", accuracy=acc)
    pred_flat = pred_test.reshape(-1)
    true_flat = y[test_idx].reshape(-1)
    metrics = ProbeMetrics(task="regress", rmse=rmse(pred_flat, true_flat))
    if np.all(true_flat > 0):
        metrics.delta1 = delta1(np.maximum(pred_flat, depth_floor), true_flat)
    return metrics


# ---------------------------------------------------------------------------
# block sweep
# ---------------------------------------------------------------------------

def blockwise_probe(cfg: ModelConfig, params, images, targets, task,
                    block_indices=None, feature_source="cls-mean",
                    depths=None, **probe_kwargs):
    """linear_probe at several encoder depths; one ProbeMetrics row each."""
    if block_indices is None:
        block_indices = list(range(1, cfg.enc_depth + 1))
    before = params_digest(params)
    results = []
    for idx in block_indices:
        if task == "regress":
            feats = extract_patch_features(images, cfg, params, block_index=idx)
            n, n_patch, d = feats.shape
            flat = feats.reshape(n * n_patch, d)
            tgt = patch_depth_targets(depths, cfg.p).reshape(-1)
            m = linear_probe(flat, tgt, "regress", **probe_kwargs)
        else:
            feats = extract_features(images, cfg, params, source=feature_source,
                                     block_index=idx)
            m = linear_probe(feats, targets, "classify", **probe_kwargs)
        m.block_index = idx
        m.relative_depth = idx / cfg.enc_depth
        m.feature_source = feature_source if task == "classify" else "patch"
        results.append(m)
    if params_digest(params) != before:
        raise EvalError("probe run mutated backbone parameters")
    return results


def write_probe_report(metrics_list, path):
    """`block_index<TAB>relative_depth<TAB>metric_name<TAB>value` per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for m in metrics_list:
            for name, value in m.named_values():
                f.write(f"{m.block_index}\t{m.relative_depth:.6f}"
                        f"\t{name}\t{value:.6f}\n")
    return path


# ---------------------------------------------------------------------------
# reconstruction demo
# ---------------------------------------------------------------------------

@dataclass
class Reconstruction:
    masked: np.ndarray         # uint8 [S, S, 3], masked patches gray
    composite: np.ndarray      # uint8 [S, S, 3], prediction + pasted visible
    truth: np.ndarray          # uint8 [S, S, 3]
    triptych: np.ndarray       # uint8 [S, 3*S, 3]
    mae: float                 # mean |composite - truth| / 255 over pixels


def _to_u8(chw):
    hwc = np.clip(chw.transpose(1, 2, 0), 0.0, 1.0)
    return np.round(hwc * 255.0).astype(np.uint8)


def reconstruct_demo(cfg: ModelConfig, params, images, mask_cfg: MaskConfig,
                     seed=0, out_dir=None, gray=0.5):
    """Per image: (masked input, reconstruction with visible pasted, truth).

    Predictions are un-normalized with the per-patch statistics of the true
    image. Visible patches in the composite are copied from the input, so
    they match ground truth byte for byte.
    """
    rng = np.random.default_rng(seed)
    batch = _canonical_batch(images, cfg.input_size)
    plan = sample_block_mask(mask_cfg, rng, batch=len(images))
    tokens = patchify(batch, cfg.p)
    norm, mu, var = normalize_target(tokens)

    latent = encode(batch, plan, cfg, params)
    pred = decode(latent, plan, cfg, params)
    pred_pixels = denormalize_target(pred.data, mu, var)

    mask = plan.mask[:, :, None]  # [B, N, 1]
    masked_tokens = np.where(mask, np.float32(gray), tokens)
    composite_tokens = np.where(mask, pred_pixels, tokens)

    results = []
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(images)):
        masked_img = _to_u8(unpatchify(masked_tokens[i:i + 1], cfg.p,
                                       cfg.grid, cfg.grid)[0])
        comp_img = _to_u8(unpatchify(composite_tokens[i:i + 1], cfg.p,
                                     cfg.grid, cfg.grid)[0])
        truth_img = _to_u8(batch[i])
        trip = np.concatenate([masked_img, comp_img, truth_img], axis=1)
        mae = float(np.mean(np.abs(comp_img.astype(np.float64)
                                   - truth_img.astype(np.float64)) / 255.0))
        results.append(Reconstruction(masked=masked_img, composite=comp_img,
                                      truth=truth_img, triptych=trip, mae=mae))
        if out_dir:
            (out_dir / f"recon_{i:03d}.png").write_bytes(encode_png(trip))
    return results
