import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fpdlab.checkpoint import (CheckpointError, canonical_json, load_checkpoint,
                               save_checkpoint)
from fpdlab.cli import main
from fpdlab.config import ConfigError, RunConfig
from fpdlab.metrics import EvalReport
from fpdlab.toyworld import InjectivityError, World, WorldParams

TINY = [
    "world.K=3", "world.L=4", "world.C=4", "world.rho=0.1",
    "teacher.steps=40", "teacher.batch=16", "teacher.width=16", "teacher.mlp_mult=2",
    "distill.steps=12", "distill.batch=4",
    "eval.n_samples=400", "eval.frechet_n=60", "eval.fp_n=8", "eval.dump_n=5",
]


def run_cli(args, sets=(), seed=11, out=None):
    argv = list(args)
    if out is not None:
        argv += ["--out", str(out)]
    argv += ["--seed", str(seed)]
    for item in (*TINY, *sets):
        argv += ["--set", item]
    return main(argv)


# ---------------------------------------------------------------------------
# config parsing


def test_unknown_key_rejected():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="unknown config key"):
        cfg.set("world.Q", 3)


def test_invalid_value_names_key_path():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="world.K"):
        cfg.set("world.K", "0")
    with pytest.raises(ConfigError, match="world.K"):
        cfg.set("world.K", "three")


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.set("drift.bandwidths", "0.1,0.4")
    cfg.set("drift.spatial", "false")
    cfg.set("distill.estimator", "soft")
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    twin = RunConfig.from_file(path)
    assert twin.values == cfg.values
    assert twin["drift.bandwidths"] == (0.1, 0.4)
    assert twin["drift.spatial"] is False


def test_config_overrides_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nworld.K = 5\nschedule.kind = linear  # inline\n")
    cfg = RunConfig.from_file(path, overrides=["world.K=7"])
    assert cfg["world.K"] == 7
    assert cfg["schedule.kind"] == "linear"


def test_fingerprint_tracks_relevant_sections():
    a, b = RunConfig(), RunConfig()
    assert a.fingerprint("world") == b.fingerprint("world")
    b.set("eval.n_samples", "5")
    assert a.fingerprint("world") == b.fingerprint("world")
    b.set("world.K", "5")
    assert a.fingerprint("world") != b.fingerprint("world")
    c = RunConfig()
    c.set("distill.lr", "0.23")
    assert a.fingerprint("teacher") == c.fingerprint("teacher")
    assert a.fingerprint("student") != c.fingerprint("student")


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_round_trip_byte_identical(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    blocks = {"teacher": {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)},
              "frozen-world": {"codebook": rng.normal(size=(5, 2))}}
    meta = {"alpha": 1, "nested": {"b": [1, 2, 3]}}
    save_checkpoint(path, "fp123", meta, blocks)
    first = path.read_bytes()
    fp, meta2, blocks2 = load_checkpoint(path)
    assert fp == "fp123" and meta2 == meta
    save_checkpoint(path, fp, meta2, blocks2)
    assert path.read_bytes() == first
    np.testing.assert_array_equal(blocks2["teacher"]["w"], blocks["teacher"]["w"])


def test_checkpoint_version_mismatch(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "fp", {}, {"b": {"a": rng.normal(size=2)}})
    raw = bytearray(path.read_bytes())
    raw[6] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_detects_corruption(tmp_path, rng):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "fp", {}, {"b": {"a": rng.normal(size=8)}})
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0xFF  # flip a data byte inside the block payload
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum|trailing"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTFPD" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_canonical_json_is_sorted():
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


# ---------------------------------------------------------------------------
# injectivity validation


def test_injectivity_error_reports_colliding_pair(enum_world):
    with pytest.raises(InjectivityError, match="sequences"):
        enum_world.validate_injectivity(min_gap=1e9)


def test_gen_world_rejects_invalid_k(tmp_path):
    code = run_cli(["gen-world"], sets=["world.K=0"], out=tmp_path)
    assert code == 2


# ---------------------------------------------------------------------------
# end-to-end pipeline on a tiny configuration


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert run_cli(["gen-world"], out=out) == 0
    assert run_cli(["train-teacher"], out=out) == 0
    assert run_cli(["distill"], out=out) == 0
    assert run_cli(["eval"], out=out) == 0
    return out


def test_pipeline_artifacts_exist(pipeline_dir):
    for name in ("world.ckpt", "teacher.ckpt", "student.ckpt", "teacher_train.csv",
                 "distill.csv", "eval_report.txt", "samples.csv",
                 "resolved_gen-world.cfg", "resolved_distill.cfg"):
        assert (pipeline_dir / name).exists(), name


def test_teacher_csv_header_and_rows(pipeline_dir):
    with (pipeline_dir / "teacher_train.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "wall_ms"]
    assert len(rows) == 41  # header + one row per step


def test_distill_csv_gan_columns_empty_when_disabled(pipeline_dir):
    with (pipeline_dir / "distill.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "drift_loss", "gan_gen", "gan_disc", "fp_residual", "wall_ms"]
    assert len(rows) == 13
    for row in rows[1:]:
        assert row[2] == "" and row[3] == ""


def test_eval_report_fields(pipeline_dir):
    report = EvalReport.from_text((pipeline_dir / "eval_report.txt").read_text())
    assert set(report.tv_by_condition) == {0, 1, 2, 3}
    assert all(0.0 <= v <= 1.0 for v in report.tv_by_condition.values())
    assert report.frechet >= 0.0
    assert report.sample_count == 400


def test_sample_dump_row_count(pipeline_dir):
    with (pipeline_dir / "samples.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 6  # header + eval.dump_n
    assert rows[0][0] == "class" and rows[0][1] == "p0"


def test_estimator_flag_round_trips_into_resolved_config(pipeline_dir, tmp_path):
    out = tmp_path / "soft"
    out.mkdir()
    assert run_cli(["gen-world"], out=out) == 0
    assert run_cli(["train-teacher"], out=out) == 0
    assert run_cli(["distill"], sets=["distill.estimator=soft"], out=out) == 0
    resolved = (out / "resolved_distill.cfg").read_text()
    assert "distill.estimator = soft" in resolved


def test_commands_never_mutate_upstream_checkpoints(pipeline_dir, tmp_path):
    world_bytes = (pipeline_dir / "world.ckpt").read_bytes()
    teacher_bytes = (pipeline_dir / "teacher.ckpt").read_bytes()
    out = tmp_path / "again"
    out.mkdir()
    assert run_cli(["distill", "--world", str(pipeline_dir / "world.ckpt"),
                    "--teacher", str(pipeline_dir / "teacher.ckpt")], out=out) == 0
    assert (pipeline_dir / "world.ckpt").read_bytes() == world_bytes
    assert (pipeline_dir / "teacher.ckpt").read_bytes() == teacher_bytes


def test_fingerprint_mismatch_is_hard_error(pipeline_dir, tmp_path):
    out = tmp_path / "mismatch"
    out.mkdir()
    code = run_cli(["distill", "--world", str(pipeline_dir / "world.ckpt"),
                    "--teacher", str(pipeline_dir / "teacher.ckpt")],
                   sets=["teacher.width=24"], out=out)
    assert code == 2


def test_missing_world_is_error(tmp_path):
    code = run_cli(["train-teacher"], out=tmp_path / "nowhere")
    assert code == 2


# ---------------------------------------------------------------------------
# reproducibility / resume


def test_gen_world_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli(["gen-world"], out=out) == 0
    assert (a / "world.ckpt").read_bytes() == (b / "world.ckpt").read_bytes()


def test_full_run_byte_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(["gen-world"], out=out) == 0
        assert run_cli(["train-teacher"], out=out) == 0
        assert run_cli(["distill"], out=out) == 0
        outs.append(out)
    a, b = outs
    assert (a / "teacher.ckpt").read_bytes() == (b / "teacher.ckpt").read_bytes()
    assert (a / "student.ckpt").read_bytes() == (b / "student.ckpt").read_bytes()
    for name in ("teacher_train.csv", "distill.csv"):
        ra = [row[:-1] for row in csv.reader((a / name).open())]
        rb = [row[:-1] for row in csv.reader((b / name).open())]
        assert ra == rb  # identical modulo the wall_ms column


def test_resume_equals_uninterrupted(tmp_path):
    straight = tmp_path / "straight"
    assert run_cli(["gen-world"], out=straight) == 0
    assert run_cli(["train-teacher"], out=straight) == 0
    assert run_cli(["distill"], out=straight) == 0

    paused = tmp_path / "paused"
    assert run_cli(["gen-world"], out=paused) == 0
    assert run_cli(["train-teacher"], out=paused) == 0
    assert run_cli(["distill", "--stop-after", "6"], out=paused) == 0
    interrupted = (paused / "student.ckpt").read_bytes()
    assert run_cli(["distill", "--resume", str(paused / "student.ckpt")], out=paused) == 0
    assert (paused / "student.ckpt").read_bytes() != interrupted

    assert (straight / "student.ckpt").read_bytes() == (paused / "student.ckpt").read_bytes()
    ra = [row[:-1] for row in csv.reader((straight / "distill.csv").open())]
    rb = [row[:-1] for row in csv.reader((paused / "distill.csv").open())]
    assert ra == rb


def test_eval_report_reproducible(pipeline_dir, tmp_path):
    out = tmp_path / "eval2"
    out.mkdir()
    assert run_cli(["eval", "--world", str(pipeline_dir / "world.ckpt"),
                    "--teacher", str(pipeline_dir / "teacher.ckpt"),
                    "--student", str(pipeline_dir / "student.ckpt")], out=out) == 0
    assert (out / "eval_report.txt").read_text() == (pipeline_dir / "eval_report.txt").read_text()


# ---------------------------------------------------------------------------
# gradcheck command


def test_gradcheck_command_passes():
    assert main(["gradcheck"]) == 0


def test_gradcheck_corrupted_operator_fails():
    assert main(["gradcheck", "--corrupt", "softmax"]) == 1


def test_gradcheck_prints_one_row_per_primitive(capsys):
    main(["gradcheck"])
    out = capsys.readouterr().out
    from fpdlab.autodiff import OP_IDS
    for name in OP_IDS:
        assert name in out


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "fpdlab.cli", "gradcheck"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert "drift_gradient" in proc.stdout
