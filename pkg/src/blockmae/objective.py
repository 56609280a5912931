"""Reconstruction and distillation losses.

The pixel loss is MSE over masked patch positions only, with a per-sample
decomposition (each sample's mean over its own masked tokens) that feeds the
curation signal. Distillation aligns projected student tokens with frozen
teacher tokens by cosine similarity at patch and class level.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .masking import gather_visible
from .tensor import ContractError, Tensor, add, gather_rows, scale, sub, tensor


@dataclass
class LossReport:
    total: Tensor           # scalar, differentiable
    per_sample: np.ndarray  # [B], detached
    n_masked_tokens: int    # across the whole batch


def masked_pixel_loss(pred, target, plan):
    """MSE over masked patch-pixels; visible positions never contribute.

    pred: Tensor [B, N, K]; target: ndarray [B, N, K] (already normalized per
    patch when that option is on); plan routes which positions are masked.
    """
    b, n, k = pred.shape
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != (b, n, k):
        raise ContractError(f"target {target.shape} does not match pred {pred.shape}")
    if plan.n_masked == 0:
        raise ContractError("no masked patches: loss undefined")
    masked_idx = plan.ids_shuffle[:, plan.n_visible:]
    pred_masked = gather_rows(pred, masked_idx)
    target_masked = np.take_along_axis(target, masked_idx[:, :, None], axis=1)
    total = ops.mse(pred_masked, target_masked)
    diff = pred_masked.data - target_masked
    per_sample = np.mean(diff * diff, axis=(1, 2))
    return LossReport(total=total, per_sample=per_sample,
                      n_masked_tokens=b * plan.n_masked)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def init_projection(rng, student_dim, teacher_dim):
    """Two-layer GELU MLP (hidden = teacher dim) plus a skip connection.

    The output layer starts at zero, so at initialization the head is exactly
    the skip path: the identity when dimensions already match.
    """
    from .model import ModelParams, xavier_uniform

    params = ModelParams()
    params.add("proj.w1", xavier_uniform(rng, student_dim, teacher_dim))
    params.add("proj.b1", np.zeros(teacher_dim))
    params.add("proj.w2", np.zeros((teacher_dim, teacher_dim)))
    params.add("proj.b2", np.zeros(teacher_dim))
    if student_dim != teacher_dim:
        params.add("proj.skip_w", xavier_uniform(rng, student_dim, teacher_dim))
    return params


def project_tokens(x, proj_params):
    """Apply the distillation head to token features [..., Ds] -> [..., Dt]."""
    h = ops.mlp(x, proj_params["proj.w1"], proj_params["proj.b1"],
                proj_params["proj.w2"], proj_params["proj.b2"])
    if "proj.skip_w" in proj_params:
        return add(h, ops.linear(x, proj_params["proj.skip_w"]))
    return add(h, x)


def distill_loss(t_cls, t_patch, s_cls, s_patch, proj_params, plan=None):
    """0.5*(1 - mean patch cosine) + 0.5*(1 - mean class cosine), in [0, 2].

    Teacher tokens are targets (no gradient flows to them). When the student
    ran masked, pass its plan: teacher patches are compared only at the
    student's visible positions.
    """
    if plan is not None:
        t_patch = gather_visible(t_patch, plan)
    t_patch_data = Tensor(np.ascontiguousarray(t_patch.data))
    t_cls_data = Tensor(np.ascontiguousarray(t_cls.data))
    s_patch_p = project_tokens(s_patch, proj_params)
    s_cls_p = project_tokens(s_cls, proj_params)
    if s_patch_p.shape != t_patch_data.shape:
        raise ContractError(
            f"projected patch tokens {s_patch_p.shape} vs teacher {t_patch_data.shape}"
        )
    if s_cls_p.shape != t_cls_data.shape:
        raise ContractError(
            f"projected class tokens {s_cls_p.shape} vs teacher {t_cls_data.shape}"
        )
    patch_term = sub(tensor(1.0), ops.cosine_mean(s_patch_p, t_patch_data))
    cls_term = sub(tensor(1.0), ops.cosine_mean(s_cls_p, t_cls_data))
    return add(scale(patch_term, 0.5), scale(cls_term, 0.5))
