"""Self-curation on a corpus salted with junk.

Score every image by its masked reconstruction loss under a briefly
trained model, normalize to percentiles, then keep images with
probability min(1, normalized loss), with a color-entropy floor that
ejects flat frames outright. Flat images are easy to reconstruct and
carry no color diversity, so both gates work against them; textured
scenes survive.
"""

import numpy as np
from blockmae import synthetic
from blockmae.model import ModelConfig, init_params
from blockmae.masking import MaskConfig
from blockmae.data import AugmentConfig
from blockmae.pipeline import pretrain, OptimConfig
from blockmae.curation import score_corpus, attach_entropy, normalize_losses, curate

rng = np.random.default_rng(99)
images, kinds = [], []
for _ in range(24):
    images.append(synthetic.make_scene(rng, size=16)[0]); kinds.append("scene")
for _ in range(12):
    images.append(synthetic.make_flat(rng, size=16)); kinds.append("flat")
for _ in range(6):
    images.append(synthetic.make_noise(rng, size=16)); kinds.append("noise")
ids = [f"{k}{i}" for i, k in enumerate(kinds)]

model_cfg = ModelConfig(input_size=16, p=4, enc_dim=32, enc_depth=2, enc_heads=2,
                        dec_dim=16, dec_depth=2, dec_heads=2, n_cls=2)
mask_cfg = MaskConfig(ratio=0.75, granularity=2, grid_h=4, grid_w=4)
opt = OptimConfig(peak_lr=3e-3, warmup_steps=10, total_steps=120, batch_size=16)
print("training a small scorer model (120 steps)...")
run = pretrain(ids, images, model_cfg, mask_cfg, opt, seed=1)

records = score_corpus(ids, images, model_cfg, run.params, mask_cfg, k_draws=4)
attach_entropy(records, ids, images)
normalize_losses(records)
curate(records, entropy_threshold=3.0, seed=5)

by_kind = {}
for rec, kind in zip(records, kinds):
    by_kind.setdefault(kind, []).append(rec)

print(f"\n{'kind':<6} {'n':>3} {'mean loss':>10} {'mean norm':>10} {'entropy':>8} {'kept':>5}")
for kind in ("scene", "flat", "noise"):
    rs = by_kind[kind]
    print(f"{kind:<6} {len(rs):>3} {np.mean([r.raw_loss for r in rs]):>10.4f} "
          f"{np.mean([r.norm_loss for r in rs]):>10.3f} "
          f"{np.mean([r.entropy_bits for r in rs]):>8.3f} "
          f"{sum(r.accepted for r in rs):>5}")

kept = sum(r.accepted for r in records)
print(f"\nkept {kept}/{len(records)}; flats are rejected by the entropy gate "
      "before the loss lottery even runs")
