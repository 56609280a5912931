"""Command-line layer: config resolution, dispatch, artifacts, determinism."""

import numpy as np
import pytest

from blockmae import runcfg, synthetic
from blockmae.cli import main
from blockmae.data import write_corpus
from blockmae.synthetic import write_depths, write_labels


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

class TestRunConfig:
    def test_defaults_cover_all_sections(self):
        cfg = runcfg.resolve()
        prefixes = {k.split(".")[0] for k in cfg}
        assert {"model", "mask", "optim", "augment", "run",
                "curate", "knn", "probe", "recon", "distill"} <= prefixes

    def test_derived_keys_are_not_settable(self):
        for key in ("mask.grid_h", "mask.grid_w", "augment.output_size"):
            assert key not in runcfg.KEY_DEFAULTS
            with pytest.raises(runcfg.ConfigError, match="unknown config key"):
                runcfg.resolve(overrides=[f"{key}=4"])

    def test_parse_value_types(self):
        assert runcfg.parse_value("7", 0) == 7
        assert isinstance(runcfg.parse_value("7", 0), int)
        assert runcfg.parse_value("2.5e-3", 0.0) == 2.5e-3
        assert runcfg.parse_value("true", False) is True
        assert runcfg.parse_value("NO", True) is False
        assert runcfg.parse_value("0.2, 1.0", (0.0, 0.0)) == (0.2, 1.0)
        assert runcfg.parse_value(" cls-mean ", "x") == "cls-mean"

    def test_parse_value_rejects_garbage(self):
        with pytest.raises(runcfg.ConfigError):
            runcfg.parse_value("1.5", 0)  # float where an int is expected
        with pytest.raises(runcfg.ConfigError):
            runcfg.parse_value("maybe", False)
        with pytest.raises(runcfg.ConfigError):
            runcfg.parse_value("0.2", (0.0, 0.0))  # one value, two expected

    def test_precedence_preset_file_override(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("optim.total_steps = 77\nmodel.n_cls = 4\n")
        cfg = runcfg.resolve("micro", f, ["model.n_cls=3"])
        assert cfg["optim.total_steps"] == 77          # file beats preset (300)
        assert cfg["model.n_cls"] == 3                 # override beats file
        assert cfg["model.input_size"] == 16           # preset survives

    def test_file_comments_and_duplicates(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# a comment\n\nmask.ratio = 0.5  # trailing\n")
        assert runcfg.read_config_file(f)["mask.ratio"] == 0.5
        f.write_text("mask.ratio = 0.5\nmask.ratio = 0.6\n")
        with pytest.raises(runcfg.ConfigError, match="duplicate"):
            runcfg.read_config_file(f)

    def test_malformed_line_reports_position(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("mask.ratio 0.5\n")
        with pytest.raises(runcfg.ConfigError, match=":1"):
            runcfg.read_config_file(f)

    def test_write_then_read_round_trips(self, tmp_path):
        cfg = runcfg.resolve("micro", overrides=["mask.ratio=0.625"])
        p = runcfg.write_config(cfg, tmp_path / "r.cfg", header=["command: x"])
        assert runcfg.read_config_file(p) == cfg

    def test_unknown_preset(self):
        with pytest.raises(runcfg.ConfigError, match="unknown preset"):
            runcfg.resolve("gigantic")

    def test_builders_stay_consistent(self):
        cfg = runcfg.resolve("micro")
        model = runcfg.model_config(cfg)
        mask = runcfg.mask_config(cfg)
        aug = runcfg.augment_config(cfg)
        assert mask.grid_h == mask.grid_w == model.grid
        assert aug.output_size == model.input_size

    def test_presets_all_instantiate(self):
        for name in runcfg.PRESETS:
            cfg = runcfg.resolve(name)
            runcfg.model_config(cfg)
            runcfg.mask_config(cfg)
            runcfg.optim_config(cfg)
            runcfg.augment_config(cfg)


# ---------------------------------------------------------------------------
# corpus + trained checkpoint shared by the command tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(77)
    images, labels, depths = [], [], []
    for i in range(24):
        img, lab, dep = synthetic.make_scene(rng, size=16, label=i % 4)
        images.append(img)
        labels.append(lab)
        depths.append(dep)
    write_corpus(images, root / "corpus.bin")
    ids = [f"corpus.bin#{i}" for i in range(len(images))]
    write_labels(root / "labels.tsv", ids, labels)
    write_depths(root / "depths.npy", depths)
    return root


PRETRAIN_ARGS = ["--preset", "micro", "--set", "optim.total_steps=60",
                 "--set", "optim.warmup_steps=5", "--seed", "11"]


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "base"
    code = main(["pretrain", *PRETRAIN_ARGS,
                 "--corpus", str(workdir / "corpus.bin"), "--out", str(out)])
    assert code == 0
    return out / "ckpt_final.bin"


# ---------------------------------------------------------------------------
# dispatch and failure modes
# ---------------------------------------------------------------------------

class TestDispatch:
    def test_unknown_command_usage_and_nonzero(self, capsys):
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_flag(self, capsys):
        assert main(["pretrain"]) == 2

    def test_unknown_flag(self, capsys):
        assert main(["gradcheck", "--bogus"]) == 2

    def test_domain_error_is_diagnosed_not_raised(self, capsys, tmp_path):
        code = main(["pretrain", "--preset", "micro",
                     "--corpus", str(tmp_path / "missing.bin"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_fails_cleanly(self, capsys, workdir, tmp_path):
        code = main(["pretrain", "--preset", "micro", "--set", "typo.key=1",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

class TestPretrainCommand:
    def test_artifacts_exist(self, workdir, trained):
        out = trained.parent
        assert trained.exists()
        assert (out / "metrics.tsv").exists()
        assert (out / "resolved.cfg").exists()
        lines = (out / "metrics.tsv").read_text().splitlines()
        assert len(lines) == 60

    def test_resolved_echo_matches_run(self, workdir, trained):
        echoed = runcfg.read_config_file(trained.parent / "resolved.cfg")
        expect = runcfg.resolve("micro", None,
                                ["optim.total_steps=60", "optim.warmup_steps=5"])
        expect["run.seed"] = 11
        assert echoed == expect
        first = (trained.parent / "resolved.cfg").read_text().splitlines()[0]
        assert first == "# command: pretrain"

    def test_rerun_is_byte_identical(self, workdir, trained, tmp_path):
        code = main(["pretrain", *PRETRAIN_ARGS,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "again")])
        assert code == 0
        assert (tmp_path / "again" / "ckpt_final.bin").read_bytes() == trained.read_bytes()

    def test_seed_changes_the_run(self, workdir, trained, tmp_path):
        args = [a for a in PRETRAIN_ARGS]
        args[args.index("11")] = "12"
        code = main(["pretrain", *args, "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "other")])
        assert code == 0
        assert (tmp_path / "other" / "ckpt_final.bin").read_bytes() != trained.read_bytes()

    def test_echo_alone_reproduces_the_run(self, workdir, trained, tmp_path):
        # layering the echoed file over a *different* preset must still
        # pin every key, seed included
        code = main(["pretrain", "--preset", "tiny",
                     "--config", str(trained.parent / "resolved.cfg"),
                     "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "replay")])
        assert code == 0
        assert (tmp_path / "replay" / "ckpt_final.bin").read_bytes() == trained.read_bytes()

    def test_resume_matches_uninterrupted(self, workdir, trained, tmp_path):
        code = main(["pretrain", *PRETRAIN_ARGS,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "a"), "--ckpt-every", "30"])
        assert code == 0
        code = main(["pretrain", *PRETRAIN_ARGS, "--seed", "999",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--out", str(tmp_path / "b"),
                     "--resume", str(tmp_path / "a" / "ckpt_step000030.bin")])
        assert code == 0
        assert (tmp_path / "b" / "ckpt_final.bin").read_bytes() == trained.read_bytes()

    def test_output_root_env_var(self, workdir, tmp_path, monkeypatch):
        monkeypatch.setenv("BLOCKMAE_OUTPUT_ROOT", str(tmp_path / "root"))
        code = main(["pretrain", "--preset", "micro", "--set",
                     "optim.total_steps=3", "--set", "optim.warmup_steps=1",
                     "--corpus", str(workdir / "corpus.bin")])
        assert code == 0
        assert (tmp_path / "root" / "pretrain" / "ckpt_final.bin").exists()


# ---------------------------------------------------------------------------
# curate / knn / probe / blockprobe / reconstruct / distill
# ---------------------------------------------------------------------------

class TestCurateCommand:
    def test_artifacts_and_determinism(self, workdir, trained, tmp_path, capsys):
        args = ["curate", "--preset", "micro",
                "--corpus", str(workdir / "corpus.bin"),
                "--checkpoint", str(trained), "--seed", "3",
                "--set", "curate.entropy_threshold=2.0"]
        assert main([*args, "--out", str(tmp_path / "c1")]) == 0
        assert main([*args, "--out", str(tmp_path / "c2")]) == 0
        m1 = (tmp_path / "c1" / "curation_manifest.tsv").read_bytes()
        m2 = (tmp_path / "c2" / "curation_manifest.tsv").read_bytes()
        assert m1 == m2
        assert (tmp_path / "c1" / "curation_summary.txt").exists()
        lines = (tmp_path / "c1" / "accepted_ids.tsv").read_text().splitlines()
        accepted = [line.split("\t")[0] for line in lines]
        assert set(accepted) <= {f"corpus.bin#{i}" for i in range(24)}
        assert 0 < len(accepted) < 24
        assert "accepted:" in capsys.readouterr().out


class TestKnnCommand:
    def test_report_written(self, workdir, trained, tmp_path, capsys):
        code = main(["knn", "--preset", "micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained),
                     "--labels", str(workdir / "labels.tsv"),
                     "--out", str(tmp_path / "k")])
        assert code == 0
        header, row = (tmp_path / "k" / "knn_report.tsv").read_text().splitlines()
        assert header.split("\t") == ["n_train", "n_test", "k",
                                      "temperature", "accuracy"]
        acc = float(row.split("\t")[-1])
        assert 0.0 <= acc <= 1.0

    def test_labels_must_cover_corpus(self, workdir, trained, tmp_path):
        bad = tmp_path / "short.tsv"
        bad.write_text("corpus.bin#0\t1\n")
        code = main(["knn", "--preset", "micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained), "--labels", str(bad),
                     "--out", str(tmp_path / "k2")])
        assert code == 1


class TestProbeCommands:
    def test_classify_report(self, workdir, trained, tmp_path):
        code = main(["probe", "--preset", "micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained),
                     "--labels", str(workdir / "labels.tsv"),
                     "--set", "probe.epochs=10", "--out", str(tmp_path / "p")])
        assert code == 0
        rows = (tmp_path / "p" / "probe_report.tsv").read_text().splitlines()
        assert len(rows) == 1
        block, rel, name, value = rows[0].split("\t")
        assert (block, name) == ("2", "accuracy")  # micro encoder has 2 blocks
        assert float(rel) == 1.0
        assert 0.0 <= float(value) <= 1.0

    def test_regress_needs_depths(self, workdir, trained, tmp_path, capsys):
        code = main(["probe", "--preset", "micro", "--set", "probe.task=regress",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained), "--out", str(tmp_path / "p2")])
        assert code == 1
        assert "--depths" in capsys.readouterr().err

    def test_regress_report(self, workdir, trained, tmp_path):
        code = main(["probe", "--preset", "micro", "--set", "probe.task=regress",
                     "--set", "probe.epochs=3",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained),
                     "--depths", str(workdir / "depths.npy"),
                     "--out", str(tmp_path / "p3")])
        assert code == 0
        text = (tmp_path / "p3" / "probe_report.tsv").read_text()
        assert "rmse" in text and "delta1" in text

    def test_blockprobe_row_per_block(self, workdir, trained, tmp_path):
        code = main(["blockprobe", "--preset", "micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained),
                     "--labels", str(workdir / "labels.tsv"),
                     "--set", "probe.epochs=5", "--out", str(tmp_path / "bp")])
        assert code == 0
        rows = (tmp_path / "bp" / "probe_report.tsv").read_text().splitlines()
        assert [r.split("\t")[0] for r in rows] == ["1", "2"]


class TestReconstructCommand:
    def test_panels_written(self, workdir, trained, tmp_path, capsys):
        code = main(["reconstruct", "--preset", "micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--checkpoint", str(trained),
                     "--set", "recon.count=3", "--out", str(tmp_path / "r")])
        assert code == 0
        panels = sorted((tmp_path / "r").glob("recon_*.png"))
        assert len(panels) == 3
        assert "mean_mae:" in capsys.readouterr().out


class TestDistillCommand:
    def test_student_trains(self, workdir, trained, tmp_path, capsys):
        code = main(["distill", "--preset", "student-micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--teacher", str(trained),
                     "--set", "optim.total_steps=30",
                     "--out", str(tmp_path / "d")])
        assert code == 0
        assert (tmp_path / "d" / "ckpt_student.bin").exists()
        assert (tmp_path / "d" / "ckpt_projection.bin").exists()
        out = capsys.readouterr().out
        final = float(out.split("final_loss: ")[1].split("\n")[0])
        assert 0.0 <= final <= 2.0

    def test_init_from_teacher_requires_same_shape(self, workdir, trained,
                                                   tmp_path, capsys):
        # student-micro is narrower than the teacher, so copying must refuse
        code = main(["distill", "--preset", "student-micro",
                     "--corpus", str(workdir / "corpus.bin"),
                     "--teacher", str(trained),
                     "--set", "distill.init_from_teacher=true",
                     "--out", str(tmp_path / "d2")])
        assert code == 1
        assert "identical" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

class TestGradcheckCommand:
    def test_all_checks_pass(self, tmp_path, capsys):
        code = main(["gradcheck", "--samples", "8", "--out", str(tmp_path / "g")])
        assert code == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        report = (tmp_path / "g" / "gradcheck_report.tsv").read_text().splitlines()
        body = [r for r in report if not r.startswith("#")][1:]
        # every case runs at both precisions, full model included
        names = {r.split("\t")[0] for r in body}
        paths = {r.split("\t")[1] for r in body}
        assert "full-model-loss" in names
        assert paths == {"f32", "f64"}
        assert all(r.endswith("pass") for r in body)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_BASE = ["--preset", "micro", "--set", "optim.total_steps=12",
              "--set", "optim.warmup_steps=2", "--seed", "4"]


class TestSweepCommand:
    def test_single_axis_three_rows(self, workdir, tmp_path):
        code = main(["sweep", *SWEEP_BASE,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--axis", "decoder-depth=1,2,3",
                     "--out", str(tmp_path / "s")])
        assert code == 0
        lines = (tmp_path / "s" / "sweep_report.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["decoder-depth", "final_loss"]
        assert len(lines) == 1 + 3
        assert [r.split("\t")[0] for r in lines[1:]] == ["1", "2", "3"]
        for row in lines[1:]:
            assert np.isfinite(float(row.split("\t")[1]))

    def test_grid_is_cross_product_with_knn(self, workdir, tmp_path):
        code = main(["sweep", *SWEEP_BASE,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--labels", str(workdir / "labels.tsv"),
                     "--axis", "granularity=1,2", "--axis", "class-tokens=1,2",
                     "--out", str(tmp_path / "s2")])
        assert code == 0
        lines = (tmp_path / "s2" / "sweep_report.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["granularity", "class-tokens",
                                        "final_loss", "knn_accuracy"]
        assert len(lines) == 1 + 4
        combos = [tuple(r.split("\t")[:2]) for r in lines[1:]]
        assert combos == [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")]

    def test_cells_write_their_own_echo(self, workdir, tmp_path):
        code = main(["sweep", *SWEEP_BASE,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--axis", "ratio=0.625,0.75",
                     "--out", str(tmp_path / "s3")])
        assert code == 0
        cells = sorted(p for p in (tmp_path / "s3").iterdir() if p.is_dir())
        assert len(cells) == 2
        ratios = []
        for cell in cells:
            echoed = runcfg.read_config_file(cell / "resolved.cfg")
            ratios.append(echoed["mask.ratio"])
            assert (cell / "ckpt_final.bin").exists()
        assert ratios == [0.625, 0.75]

    def test_unknown_axis_rejected(self, workdir, tmp_path, capsys):
        code = main(["sweep", *SWEEP_BASE,
                     "--corpus", str(workdir / "corpus.bin"),
                     "--axis", "flux-capacitance=1,2",
                     "--out", str(tmp_path / "s4")])
        assert code == 1
        assert "unknown sweep axis" in capsys.readouterr().err
