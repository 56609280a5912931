"""Sweep one knob against another and read the report.

Short runs, so the numbers are noisy; the point is the mechanics. Each
cell trains in its own directory with its own resolved.cfg, and the
top-level report collects final losses (and kNN accuracy when labels
are supplied).
"""

import os
import tempfile
import numpy as np
from pathlib import Path
from blockmae import synthetic
from blockmae.data import encode_png
from blockmae.cli import main

work = Path(tempfile.mkdtemp(prefix="blockmae-sweep-"))
corpus = work / "corpus"
corpus.mkdir()
rng = np.random.default_rng(5)
images, labels, _ = synthetic.make_dataset(rng, 32, size=16)
ids = []
for i, img in enumerate(images):
    name = f"img_{i:03d}.png"
    (corpus / name).write_bytes(encode_png(img))
    ids.append(name)
synthetic.write_labels(corpus / "labels.tsv", ids, labels)

argv = ["sweep", "--corpus", str(corpus),
        "--labels", str(corpus / "labels.tsv"),
        "--axis", "ratio=0.5,0.75",
        "--axis", "granularity=1,2",
        "--set", "optim.total_steps=30", "--set", "optim.warmup_steps=5",
        "--seed", "2", "--out", str(work / "sweep")]
print("$ blockmae " + " ".join(argv))
code = main(argv)
print(f"(exit {code})\n")

print((work / "sweep" / "sweep_report.tsv").read_text())
