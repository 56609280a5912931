"""Compress a teacher into a narrower student by feature matching.

The frozen teacher sees the full image; the student sees a half-masked
view and must reproduce the teacher's class and patch tokens through a
small projection head. Two sanity points worth watching: a student
copied from an equal-shape teacher starts at ~zero loss, and a fresh
narrow student should fall well below its starting loss.
"""

import numpy as np
from blockmae import synthetic
from blockmae.model import ModelConfig
from blockmae.masking import MaskConfig
from blockmae.pipeline import pretrain, distill, OptimConfig

rng = np.random.default_rng(12)
images = [synthetic.make_scene(rng, size=16)[0] for _ in range(48)]
ids = [f"d{i}" for i in range(48)]

teacher_cfg = ModelConfig(input_size=16, p=4, enc_dim=32, enc_depth=2, enc_heads=2,
                          dec_dim=16, dec_depth=2, dec_heads=2, n_cls=2)
mask_cfg = MaskConfig(ratio=0.75, granularity=2, grid_h=4, grid_w=4)
print("pre-training the teacher (200 steps)...")
teacher = pretrain(ids, images, teacher_cfg, mask_cfg,
                   OptimConfig(peak_lr=3e-3, warmup_steps=10, total_steps=200,
                               batch_size=16), seed=0)

# copied student, no masking: the projection starts as identity + zero
copy_opt = OptimConfig(peak_lr=1e-3, warmup_steps=1, total_steps=2, batch_size=8)
copied = distill(teacher_cfg, teacher.params, teacher_cfg, ids, images,
                 copy_opt, mask_cfg=None, seed=3, init_from_teacher=True)
print(f"copied student, first-step loss: {copied.metrics[0][1]:.2e} (should be ~0)")

student_cfg = ModelConfig(input_size=16, p=4, enc_dim=16, enc_depth=1, enc_heads=2,
                          dec_dim=16, dec_depth=1, dec_heads=2, n_cls=2,
                          drop_path_rate=0.1)
student_mask = MaskConfig(ratio=0.5, granularity=2, grid_h=4, grid_w=4)
opt = OptimConfig(peak_lr=3e-3, warmup_steps=10, total_steps=200, batch_size=16)
print("distilling a fresh half-width student (200 steps)...")
result = distill(teacher_cfg, teacher.params, student_cfg, ids, images,
                 opt, mask_cfg=student_mask, seed=4)

losses = [m[1] for m in result.metrics]
for i in range(0, 200, 40):
    print(f"  steps {i:3d}-{i + 39:3d}: mean distill loss {np.mean(losses[i:i + 40]):.4f}")
print(f"start {losses[0]:.4f} -> end {losses[-1]:.4f}")
