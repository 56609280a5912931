"""The command-line surface, end to end, in a throwaway directory.

Every command writes its artifacts plus a resolved.cfg echo that is
itself a loadable config, so any run can be reproduced from its own
output directory. This script drives main() in-process.
"""

import os
import tempfile
import numpy as np
from pathlib import Path
from blockmae import synthetic
from blockmae.cli import main

work = Path(tempfile.mkdtemp(prefix="blockmae-tour-"))
os.environ["BLOCKMAE_OUTPUT_ROOT"] = str(work / "runs")
corpus = work / "corpus"
corpus.mkdir()

rng = np.random.default_rng(0)
images, labels, _ = synthetic.make_dataset(rng, 24, size=16)
from blockmae.data import encode_png
ids = []
for i, img in enumerate(images):
    (corpus / f"img_{i:03d}.png").write_bytes(encode_png(img))
    ids.append(f"img_{i:03d}.png")
synthetic.write_labels(corpus / "labels.tsv", ids, labels)

def run(*argv):
    print(f"\n$ blockmae {' '.join(argv)}")
    code = main(list(argv))
    print(f"(exit {code})")
    return code

run("pretrain", "--corpus", str(corpus), "--preset", "micro",
    "--set", "optim.total_steps=40", "--set", "optim.warmup_steps=5",
    "--seed", "3", "--out", str(work / "runs/pre"))
ckpt = str(work / "runs/pre/ckpt_final.bin")

run("knn", "--checkpoint", ckpt, "--corpus", str(corpus),
    "--labels", str(corpus / "labels.tsv"), "--out", str(work / "runs/knn"))

# the pretrain echo pins the micro geometry, so downstream commands
# can take their config straight from the run they consume
echo = str(work / "runs/pre/resolved.cfg")

run("reconstruct", "--checkpoint", ckpt, "--corpus", str(corpus),
    "--config", echo, "--set", "recon.count=2", "--out", str(work / "runs/recon"))

run("curate", "--checkpoint", ckpt, "--corpus", str(corpus),
    "--config", echo, "--out", str(work / "runs/curate"))

run("gradcheck", "--samples", "5", "--out", str(work / "runs/grad"))

print(f"\nartifacts under {work}/runs:")
for p in sorted((work / "runs").rglob("*")):
    if p.is_file():
        print("  " + str(p.relative_to(work / "runs")))
