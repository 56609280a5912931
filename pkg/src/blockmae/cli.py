"""Command-line entry point for every workflow in the package.

Subcommands: pretrain, curate, distill, probe, knn, blockprobe,
reconstruct, gradcheck, sweep. Configuration comes from a preset, an
optional flat key=value file, and repeatable --set overrides, in that
precedence order; every run writes the fully resolved configuration next
to its outputs so any artifact can be reproduced from its directory
alone. The default output root is $BLOCKMAE_OUTPUT_ROOT, else ./runs.
"""

import argparse
import itertools
import os
import sys
from pathlib import Path

import numpy as np

from . import ops  # noqa: F401  (re-exported op table feeds gradcheck cases)
from . import runcfg
from . import tensor as T
from .curation import (CurationError, attach_entropy, curate, score_corpus,
                       write_curation_manifest, write_curation_summary)
from .data import (CorpusError, load_corpus_with_ids, normalize_target,
                   patchify, write_manifest)
from .evaluate import (EvalError, KnnConfig, blockwise_probe, extract_features,
                       knn_classify, reconstruct_demo, write_probe_report)
from .gradcheck import check_gradients, spot_check_gradients
from .masking import MaskConfig, MaskingError, sample_block_mask
from .model import ModelConfig, init_params
from .objective import masked_pixel_loss
from .pipeline import PipelineError, distill, load_checkpoint, pretrain
from .synthetic import read_labels
from .tensor import ContractError, NonFiniteError, Tensor

_ERRORS = (runcfg.ConfigError, CorpusError, MaskingError, CurationError,
           EvalError, PipelineError, NonFiniteError, ContractError, OSError)


def output_root():
    return Path(os.environ.get("BLOCKMAE_OUTPUT_ROOT", "runs"))


def _out_dir(args, command):
    out = Path(args.out) if args.out else output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args):
    cfg = runcfg.resolve(args.preset, args.config, args.overrides)
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    return cfg


def _echo(cfg, out, command, **inputs):
    header = [f"command: {command}"]
    header += [f"{k}: {v}" for k, v in inputs.items() if v is not None]
    return runcfg.write_config(cfg, out / "resolved.cfg", header=header)


def _load_model(path):
    ckpt = load_checkpoint(path)
    return ckpt.model_cfg, ckpt.params


def _mask_for(model_cfg, cfg):
    # the grid always follows the model actually being run
    return MaskConfig(ratio=cfg["mask.ratio"], granularity=cfg["mask.granularity"],
                      grid_h=model_cfg.grid, grid_w=model_cfg.grid)


def _aligned_labels(ids, labels_path):
    label_ids, labels = read_labels(labels_path)
    mapping = dict(zip(label_ids, labels))
    missing = [i for i in ids if i not in mapping]
    if missing:
        raise EvalError(f"{len(missing)} corpus ids have no label "
                        f"(first: {missing[0]!r})")
    return np.array([mapping[i] for i in ids], dtype=np.int64)


def _smoothed_final(metrics, window=10):
    losses = [m[1] for m in metrics[-window:]]
    return float(np.mean(losses)) if losses else float("nan")


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args):
    cfg = _resolve(args)
    out = _out_dir(args, "pretrain")
    ids, images = load_corpus_with_ids(args.corpus)
    _echo(cfg, out, "pretrain", corpus=args.corpus, resume=args.resume)
    result = pretrain(ids, images, runcfg.model_config(cfg), _mask_for(runcfg.model_config(cfg), cfg),
                      runcfg.optim_config(cfg), aug_cfg=runcfg.augment_config(cfg),
                      seed=cfg["run.seed"], out_dir=out, ckpt_every=args.ckpt_every,
                      resume_from=args.resume)
    first, last = result.metrics[0], result.metrics[-1]
    print(f"steps: {len(result.metrics)} (first recorded {first[0]}, last {last[0]})")
    print(f"initial_loss: {first[1]:.6f}")
    print(f"final_loss: {last[1]:.6f}")
    print(f"final_loss_smoothed: {_smoothed_final(result.metrics):.6f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_distill(args):
    cfg = _resolve(args)
    out = _out_dir(args, "distill")
    teacher_cfg, teacher_params = _load_model(args.teacher)
    student_cfg = runcfg.model_config(cfg)
    ids, images = load_corpus_with_ids(args.corpus)
    mask_cfg = _mask_for(student_cfg, cfg) if cfg["distill.student_masked"] else None
    _echo(cfg, out, "distill", corpus=args.corpus, teacher=args.teacher)
    result = distill(teacher_cfg, teacher_params, student_cfg, ids, images,
                     runcfg.optim_config(cfg), mask_cfg=mask_cfg,
                     aug_cfg=runcfg.augment_config(cfg), seed=cfg["run.seed"],
                     out_dir=out, init_from_teacher=cfg["distill.init_from_teacher"])
    print(f"initial_loss: {result.metrics[0][1]:.6f}")
    print(f"final_loss: {result.metrics[-1][1]:.6f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_curate(args):
    cfg = _resolve(args)
    out = _out_dir(args, "curate")
    model_cfg, params = _load_model(args.checkpoint)
    ids, images = load_corpus_with_ids(args.corpus)
    _echo(cfg, out, "curate", corpus=args.corpus, checkpoint=args.checkpoint)
    records = score_corpus(ids, images, model_cfg, params, _mask_for(model_cfg, cfg),
                           k_draws=cfg["curate.mask_draws"],
                           batch_size=cfg["curate.batch_size"])
    attach_entropy(records, ids, images)
    curate(records, entropy_threshold=cfg["curate.entropy_threshold"],
           seed=cfg["run.seed"])
    write_curation_manifest(records, out / "curation_manifest.tsv")
    write_curation_summary(records, out / "curation_summary.txt",
                           cfg["curate.entropy_threshold"])
    accepted = [r.source_id for r in records if r.accepted]
    write_manifest(out / "accepted_ids.tsv", accepted)
    print(f"scored: {len(records)}")
    print(f"accepted: {len(accepted)} ({len(accepted) / len(records):.1%})")
    print(f"manifest: {out / 'curation_manifest.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# evaluation commands
# ---------------------------------------------------------------------------

def _knn_eval(model_cfg, params, images, labels, cfg):
    feats = extract_features(images, model_cfg, params, source=cfg["knn.source"])
    rng = np.random.default_rng(cfg["run.seed"])
    n = len(labels)
    n_test = max(1, int(round(n * cfg["knn.holdout"])))
    if n_test >= n:
        raise EvalError("holdout leaves no training examples")
    perm = rng.permutation(n)
    test, train = perm[:n_test], perm[n_test:]
    kcfg = KnnConfig(k=min(cfg["knn.k"], len(train)),
                     temperature=cfg["knn.temperature"])
    pred = knn_classify(feats[train], labels[train], feats[test], kcfg)
    return float(np.mean(pred == labels[test])), len(train), n_test


def cmd_knn(args):
    cfg = _resolve(args)
    out = _out_dir(args, "knn")
    model_cfg, params = _load_model(args.checkpoint)
    ids, images = load_corpus_with_ids(args.corpus)
    labels = _aligned_labels(ids, args.labels)
    _echo(cfg, out, "knn", corpus=args.corpus, checkpoint=args.checkpoint,
          labels=args.labels)
    acc, n_train, n_test = _knn_eval(model_cfg, params, images, labels, cfg)
    report = out / "knn_report.tsv"
    with open(report, "w") as f:
        f.write("n_train\tn_test\tk\ttemperature\taccuracy\n")
        f.write(f"{n_train}\t{n_test}\t{cfg['knn.k']}"
                f"\t{cfg['knn.temperature']}\t{acc:.6f}\n")
    print(f"accuracy: {acc:.6f} ({n_train} train / {n_test} test)")
    print(f"report: {report}")
    return 0


def _probe_inputs(args, cfg, ids, images):
    task = cfg["probe.task"]
    if task == "classify":
        if not args.labels:
            raise EvalError("probe.task=classify requires --labels")
        return _aligned_labels(ids, args.labels), None
    if task == "regress":
        if not args.depths:
            raise EvalError("probe.task=regress requires --depths")
        depths = np.load(args.depths)
        if len(depths) != len(images):
            raise EvalError(f"depth count {len(depths)} != corpus size {len(images)}")
        return None, depths
    raise EvalError(f"unknown probe.task {task!r}")


def _probe_kwargs(cfg):
    return dict(epochs=cfg["probe.epochs"], lr=cfg["probe.lr"],
                batch_size=cfg["probe.batch_size"], holdout=cfg["probe.holdout"],
                seed=cfg["run.seed"])


def cmd_probe(args):
    cfg = _resolve(args)
    out = _out_dir(args, "probe")
    model_cfg, params = _load_model(args.checkpoint)
    ids, images = load_corpus_with_ids(args.corpus)
    targets, depths = _probe_inputs(args, cfg, ids, images)
    _echo(cfg, out, "probe", corpus=args.corpus, checkpoint=args.checkpoint,
          labels=args.labels, depths=args.depths)
    block = cfg["probe.block"] or model_cfg.enc_depth
    rows = blockwise_probe(model_cfg, params, images, targets, cfg["probe.task"],
                           block_indices=[block], feature_source=cfg["probe.source"],
                           depths=depths, **_probe_kwargs(cfg))
    report = write_probe_report(rows, out / "probe_report.tsv")
    for m in rows:
        for name, value in m.named_values():
            print(f"block {m.block_index} {name}: {value:.6f}")
    print(f"report: {report}")
    return 0


def cmd_blockprobe(args):
    cfg = _resolve(args)
    out = _out_dir(args, "blockprobe")
    model_cfg, params = _load_model(args.checkpoint)
    ids, images = load_corpus_with_ids(args.corpus)
    targets, depths = _probe_inputs(args, cfg, ids, images)
    _echo(cfg, out, "blockprobe", corpus=args.corpus, checkpoint=args.checkpoint,
          labels=args.labels, depths=args.depths)
    spec = cfg["probe.blocks"]
    blocks = None if spec == "all" else [int(b) for b in spec.split(",") if b.strip()]
    rows = blockwise_probe(model_cfg, params, images, targets, cfg["probe.task"],
                           block_indices=blocks, feature_source=cfg["probe.source"],
                           depths=depths, **_probe_kwargs(cfg))
    report = write_probe_report(rows, out / "probe_report.tsv")
    for m in rows:
        for name, value in m.named_values():
            print(f"block {m.block_index} {name}: {value:.6f}")
    print(f"report: {report}")
    return 0


def cmd_reconstruct(args):
    cfg = _resolve(args)
    out = _out_dir(args, "reconstruct")
    model_cfg, params = _load_model(args.checkpoint)
    ids, images = load_corpus_with_ids(args.corpus)
    count = min(cfg["recon.count"], len(images))
    _echo(cfg, out, "reconstruct", corpus=args.corpus, checkpoint=args.checkpoint)
    recons = reconstruct_demo(model_cfg, params, images[:count],
                              _mask_for(model_cfg, cfg), seed=cfg["run.seed"],
                              out_dir=out, gray=cfg["recon.gray"])
    for i, r in enumerate(recons):
        print(f"image {i} ({ids[i]}): masked_mae {r.mae:.6f}")
    print(f"mean_mae: {float(np.mean([r.mae for r in recons])):.6f}")
    print(f"panels: {out}/recon_*.png")
    return 0


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _op_cases(dtype, rng):
    """One scalar-loss closure per differentiable kernel op."""
    def make(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype),
                      requires_grad=True)

    def fixed(shape):
        return rng.uniform(-1.0, 1.0, size=shape).astype(dtype)

    cases = []

    def case(name, params, build):
        cases.append((name, params, build))

    a, b = make((3, 4)), make((3, 4))
    case("add", {"a": a, "b": b}, lambda: T.sum_(T.mul(T.add(a, b), T.add(a, b))))
    c, d = make((3, 4)), make((3, 4))
    case("sub", {"c": c, "d": d}, lambda: T.sum_(T.mul(T.sub(c, d), T.sub(c, d))))
    e, f = make((3, 4)), make((3, 4))
    case("mul", {"e": e, "f": f}, lambda: T.sum_(T.mul(T.mul(e, f), T.mul(e, f))))
    g = make((3, 4))
    h = make((3, 4), lo=0.5, hi=1.5)
    case("div", {"g": g, "h": h}, lambda: T.sum_(T.mul(T.div(g, h), T.div(g, h))))
    i = make((3, 4))
    case("scale", {"i": i}, lambda: T.sum_(T.mul(T.scale(i, 1.7), T.scale(i, 1.7))))
    j, k = make((2, 3, 4)), make((4, 5))
    jk_t = fixed((2, 3, 5))
    case("matmul", {"j": j, "k": k}, lambda: ops.mse(T.matmul(j, k), jk_t))
    m = make((2, 6))
    m_t = fixed((3, 4))
    case("reshape", {"m": m}, lambda: ops.mse(T.reshape(m, (3, 4)), m_t))
    n = make((2, 3, 4))
    n_t = fixed((3, 2, 4))
    case("transpose", {"n": n}, lambda: ops.mse(T.transpose(n, (1, 0, 2)), n_t))
    o = make((2, 5, 4))
    o_idx = np.array([[4, 0, 2], [1, 1, 3]])
    o_t = fixed((2, 3, 4))
    case("gather_rows", {"o": o}, lambda: ops.mse(T.gather_rows(o, o_idx), o_t))
    p1, p2 = make((2, 2, 3)), make((2, 4, 3))
    cat_t = fixed((2, 6, 3))
    case("concat_rows", {"p1": p1, "p2": p2},
         lambda: ops.mse(T.concat_rows([p1, p2]), cat_t))
    q = make((2, 6, 3))
    q_t = fixed((2, 3, 3))
    case("narrow_rows", {"q": q}, lambda: ops.mse(T.narrow_rows(q, 2, 3), q_t))
    r = make((4, 3))
    r_t = fixed((2, 4, 3))
    case("expand_batch", {"r": r}, lambda: ops.mse(T.expand_batch(r, 2), r_t))
    s = make((3, 4))
    case("sum", {"s": s}, lambda: T.sum_(T.mul(s, s)))
    u = make((3, 4))
    u_t = fixed((4,))
    case("mean", {"u": u}, lambda: ops.mse(T.mean(u, axis=0), u_t))
    v = make((3, 4), lo=0.5, hi=2.0)
    v_t = fixed((3, 4))
    case("sqrt", {"v": v}, lambda: ops.mse(T.sqrt(v), v_t))

    x1, w1, b1 = make((2, 3, 4)), make((4, 3)), make((3,))
    lin_t = fixed((2, 3, 3))
    case("linear", {"x": x1, "w": w1, "b": b1},
         lambda: ops.mse(ops.linear(x1, w1, b1), lin_t))
    x2 = make((2, 3, 6))
    gm = make((6,), lo=0.5, hi=1.5)
    bt = make((6,))
    ln_t = fixed((2, 3, 6))
    case("layer_norm", {"x": x2, "gamma": gm, "beta": bt},
         lambda: ops.mse(ops.layer_norm(x2, gm, bt), ln_t))
    x3 = make((3, 5), lo=-2.0, hi=2.0)
    ge_t = fixed((3, 5))
    case("gelu", {"x": x3}, lambda: ops.mse(ops.gelu(x3), ge_t))
    x4 = make((2, 4, 5))
    sm_t = fixed((2, 4, 5))
    case("softmax", {"x": x4}, lambda: ops.mse(ops.softmax(x4), sm_t))
    x5 = make((2, 4, 6))
    qkv_w, qkv_b = make((6, 18)), make((18,))
    pr_w, pr_b = make((6, 6)), make((6,))
    at_t = fixed((2, 4, 6))
    case("attention", {"x": x5, "qkv_w": qkv_w, "qkv_b": qkv_b,
                       "proj_w": pr_w, "proj_b": pr_b},
         lambda: ops.mse(ops.multi_head_self_attention(x5, qkv_w, qkv_b,
                                                       pr_w, pr_b, 2), at_t))
    x6 = make((2, 3, 4))
    mw1, mb1 = make((4, 8)), make((8,))
    mw2, mb2 = make((8, 4)), make((4,))
    ml_t = fixed((2, 3, 4))
    case("mlp", {"x": x6, "w1": mw1, "b1": mb1, "w2": mw2, "b2": mb2},
         lambda: ops.mse(ops.mlp(x6, mw1, mb1, mw2, mb2), ml_t))
    x7 = make((3, 6))
    ms_t = fixed((3, 6))
    case("mse", {"x": x7}, lambda: ops.mse(x7, ms_t))
    a8, b8 = make((2, 3, 4)), make((2, 3, 4))
    case("cosine_mean", {"a": a8, "b": b8}, lambda: ops.cosine_mean(a8, b8))
    x9 = make((4, 3, 5))
    dp_t = fixed((4, 3, 5))
    # fresh generator per call: identical drop mask on every forward
    case("drop_path", {"x": x9},
         lambda: ops.mse(ops.drop_path(x9, 0.5, np.random.default_rng(3), True),
                         dp_t))
    return cases


class _ParamView:
    """Dict-backed stand-in for ModelParams with converted dtypes."""

    def __init__(self, store):
        self._store = store

    def __getitem__(self, name):
        return self._store[name]

    def __contains__(self, name):
        return name in self._store

    def items(self):
        return self._store.items()

    def values(self):
        return self._store.values()


def _full_model_case(dtype, seed):
    """Masked-reconstruction loss of the full tiny model, end to end."""
    from .curation import canonicalize
    from .model import decode, encode, tiny_config
    from .synthetic import make_scene

    cfg = tiny_config()
    mask_cfg = MaskConfig(ratio=0.75, granularity=4,
                          grid_h=cfg.grid, grid_w=cfg.grid)
    rng = np.random.default_rng(seed)
    base = init_params(cfg, rng)
    store = {n: Tensor(t.data.astype(dtype), requires_grad=True)
             for n, t in base.items()}
    params = _ParamView(store)
    imgs = [make_scene(np.random.default_rng(100 + i), size=cfg.input_size)[0]
            for i in range(2)]
    batch = np.stack([canonicalize(im, cfg.input_size) for im in imgs]).astype(dtype)
    plan = sample_block_mask(mask_cfg, np.random.default_rng(5), batch=2)
    target, _, _ = normalize_target(patchify(batch, cfg.p))

    def build():
        latent = encode(batch, plan, cfg, params)
        pred = decode(latent, plan, cfg, params)
        return masked_pixel_loss(pred, target, plan).total

    return build, store


_GRAD_PATHS = (
    # (label, dtype, fd step, tolerance)
    ("f32", np.float32, 6e-3, 1e-2),
    ("f64", np.float64, 1e-5, 1e-4),
)


def run_gradcheck(samples=50, seed=0, report_path=None):
    """Finite-difference verification of every op plus the full model.

    Returns (all_passed, report rows). Each op runs a dense check at both
    precisions; the whole-model loss is spot-checked on `samples` random
    parameter entries per precision.
    """
    rows = []
    ok = True
    for label, dtype, eps, tol in _GRAD_PATHS:
        with T.precision(dtype):
            for name, params, build in _op_cases(dtype, np.random.default_rng(seed)):
                worst, _ = check_gradients(build, params, eps)
                passed = worst < tol
                ok &= passed
                rows.append((name, label, worst, tol, passed))
            build, store = _full_model_case(dtype, seed)
            err, _ = spot_check_gradients(build, store, eps, samples,
                                          np.random.default_rng(seed + 1))
            passed = err < tol
            ok &= passed
            rows.append(("full-model-loss", label, err, tol, passed))
    if report_path is not None:
        with open(report_path, "w") as f:
            f.write(f"# samples: {samples}\n# seed: {seed}\n")
            f.write("case\tpath\trel_err\ttolerance\tstatus\n")
            for name, label, err, tol, passed in rows:
                f.write(f"{name}\t{label}\t{err:.3e}\t{tol:.0e}"
                        f"\t{'pass' if passed else 'FAIL'}\n")
    return ok, rows


def cmd_gradcheck(args):
    out = _out_dir(args, "gradcheck")
    ok, rows = run_gradcheck(samples=args.samples, seed=args.seed or 0,
                             report_path=out / "gradcheck_report.tsv")
    for name, label, err, tol, passed in rows:
        print(f"{'pass' if passed else 'FAIL'}  {name:<18} {label}  "
              f"rel_err {err:.3e}  (tol {tol:.0e})")
    n_pass = sum(1 for r in rows if r[4])
    print(f"summary: {n_pass}/{len(rows)} checks passed")
    print(f"report: {out / 'gradcheck_report.tsv'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

_AXIS_KEYS = {
    "decoder-depth": "model.dec_depth",
    "decoder-width": "model.dec_dim",
    "ratio": "mask.ratio",
    "granularity": "mask.granularity",
    "class-tokens": "model.n_cls",
}


def _parse_axis(spec):
    name, sep, tail = spec.partition("=")
    name = name.strip()
    if not sep or not tail.strip():
        raise runcfg.ConfigError(f"axis {spec!r} is not of the form name=v1,v2,...")
    key = _AXIS_KEYS.get(name, name)
    if key not in runcfg.KEY_DEFAULTS:
        raise runcfg.ConfigError(
            f"unknown sweep axis {name!r}; named axes: {sorted(_AXIS_KEYS)}; "
            "any config key also works")
    values = [runcfg.parse_value(v, runcfg.KEY_DEFAULTS[key])
              for v in tail.split(",") if v.strip()]
    if not values:
        raise runcfg.ConfigError(f"axis {spec!r} lists no values")
    return name, key, values


def cmd_sweep(args):
    base = _resolve(args)
    out = _out_dir(args, "sweep")
    axes = [_parse_axis(spec) for spec in args.axis]
    ids, images = load_corpus_with_ids(args.corpus)
    labels = _aligned_labels(ids, args.labels) if args.labels else None
    _echo(base, out, "sweep", corpus=args.corpus, labels=args.labels,
          axes="; ".join(args.axis))

    names = [a[0] for a in axes]
    header = names + ["final_loss"] + (["knn_accuracy"] if labels is not None else [])
    report_rows = []
    for index, combo in enumerate(itertools.product(*[a[2] for a in axes])):
        cfg = dict(base)
        for (name, key, _), value in zip(axes, combo):
            cfg[key] = value
        tag = "_".join(f"{n}-{runcfg.format_value(v)}" for n, v in zip(names, combo))
        cell = out / f"cell_{index:02d}_{tag}"
        cell.mkdir(parents=True, exist_ok=True)
        _echo(cfg, cell, "sweep-cell", corpus=args.corpus)
        model_cfg = runcfg.model_config(cfg)
        result = pretrain(ids, images, model_cfg, _mask_for(model_cfg, cfg),
                          runcfg.optim_config(cfg), aug_cfg=runcfg.augment_config(cfg),
                          seed=cfg["run.seed"], out_dir=cell)
        row = [runcfg.format_value(v) for v in combo]
        row.append(f"{_smoothed_final(result.metrics):.6f}")
        if labels is not None:
            acc, _, _ = _knn_eval(model_cfg, result.params, images, labels, cfg)
            row.append(f"{acc:.6f}")
        report_rows.append(row)

    report = out / "sweep_report.tsv"
    with open(report, "w") as f:
        f.write("\t".join(header) + "\n")
        for row in report_rows:
            f.write("\t".join(row) + "\n")
    print("\t".join(header))
    for row in report_rows:
        print("\t".join(row))
    print(f"rows: {len(report_rows)}")
    print(f"report: {report}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(sp, default_preset="tiny"):
    sp.add_argument("--preset", default=default_preset,
                    choices=sorted(runcfg.PRESETS),
                    help=f"named starting point (default {default_preset})")
    sp.add_argument("--config", default=None,
                    help="flat key=value config file layered over the preset")
    sp.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override one config key")
    sp.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    sp.add_argument("--out", default=None,
                    help="output directory (default $BLOCKMAE_OUTPUT_ROOT/<command>)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="blockmae",
        description="Self-supervised pre-training with block-masked "
                    "reconstruction, plus curation, distillation, and "
                    "frozen-feature evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True, help="packed corpus or image directory")
    sp.add_argument("--ckpt-every", type=int, default=0, metavar="N",
                    help="also checkpoint every N steps")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("curate", help="score a corpus and soft-filter it")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True, help="model used for scoring")
    sp.set_defaults(func=cmd_curate)

    sp = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_config_flags(sp, default_preset="student-tiny")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("probe", help="linear probe on frozen features")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--labels", default=None, help="source_id<TAB>label file")
    sp.add_argument("--depths", default=None, help=".npy depth maps, corpus order")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("knn", help="nearest-neighbor classification probe")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--labels", required=True)
    sp.set_defaults(func=cmd_knn)

    sp = sub.add_parser("blockprobe", help="probe features after each encoder block")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--labels", default=None)
    sp.add_argument("--depths", default=None)
    sp.set_defaults(func=cmd_blockprobe)

    sp = sub.add_parser("reconstruct", help="masked/reconstructed/truth panels")
    _add_config_flags(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--samples", type=int, default=50,
                    help="random parameter entries for the whole-model check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="grid of short pre-training runs")
    _add_config_flags(sp, default_preset="micro")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--labels", default=None,
                    help="adds a k-NN accuracy column to the report")
    sp.add_argument("--axis", action="append", required=True,
                    metavar="NAME=V1,V2,...",
                    help="sweep axis; repeat for a grid "
                         f"(named axes: {', '.join(sorted(_AXIS_KEYS))})")
    sp.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/diagnostic
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
