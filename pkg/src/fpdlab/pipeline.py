"""End-to-end orchestration: build world, train teacher, distill, evaluate.

Each stage produces a checkpoint tied to a config fingerprint; loaders verify
the fingerprint of the stage they depend on. RNG and optimizer state ride in
the student checkpoint so an interrupted distillation resumes bit-exactly.
"""

from __future__ import annotations

import csv
import os
import time as _time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .distill import (Discriminator, DistillConfig, build_discriminator, build_student,
                      distill_step, student_sample_batch)
from .masking import NoiseSchedule
from .metrics import EvalReport, fixed_point_residual, frechet_proxy, mean_tv
from .optim import RmsScaledSgd
from .rng import RngStream, child_seed
from .teacher import (ConfidenceRule, DenoiserNet, SamplerPlan, build_denoiser,
                      sample_iterative_batch, teacher_loss)
from .toyworld import World

WORLD_CKPT = "world.ckpt"
TEACHER_CKPT = "teacher.ckpt"
STUDENT_CKPT = "student.ckpt"
TEACHER_CSV = "teacher_train.csv"
DISTILL_CSV = "distill.csv"
REPORT_TXT = "eval_report.txt"
SAMPLES_CSV = "samples.csv"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_resolved_config(cfg: RunConfig, out_dir: Path, command: str) -> Path:
    path = out_dir / f"resolved_{command}.cfg"
    _atomic_write(path, cfg.to_text())
    return path


# ---------------------------------------------------------------------------
# gen-world


def run_gen_world(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    world = World.build(cfg.world_params(), cfg["seed"], validate=True)
    path = out_dir / WORLD_CKPT
    save_checkpoint(path, cfg.fingerprint("world"), {"world": world.meta()},
                    {"frozen-world": world.arrays()})
    write_resolved_config(cfg, out_dir, "gen-world")
    return path


def load_world(cfg: RunConfig, path: Path) -> World:
    fingerprint, meta, blocks = load_checkpoint(path)
    if fingerprint != cfg.fingerprint("world"):
        raise CheckpointError(
            f"{path}: world fingerprint mismatch (checkpoint was built from a different "
            "seed/world configuration)"
        )
    return World.from_arrays(meta["world"], blocks["frozen-world"])


# ---------------------------------------------------------------------------
# train-teacher


def run_train_teacher(cfg: RunConfig, out_dir: Path, world_path: Path | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    world = load_world(cfg, world_path or out_dir / WORLD_CKPT)
    schedule = cfg.schedule()
    tcfg = cfg.teacher_cfg()
    seed = cfg["seed"]

    net = build_denoiser(world, tcfg.width, tcfg.mlp_mult, seed)
    rng = RngStream(child_seed(seed, "teacher-train"))
    opt = RmsScaledSgd(net.params, lr=tcfg.lr)
    rows = []
    for step in range(tcfg.steps):
        t0 = _time.perf_counter()
        classes = rng.integers(0, world.params.classes, size=tcfg.batch).astype(np.int64)
        tokens = world.dataset.sample_batch(classes, rng)
        loss = teacher_loss(net, tokens, classes, schedule, rng)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        rows.append((step, loss.item(), (_time.perf_counter() - t0) * 1e3))
    net.set_trainable(False)

    path = out_dir / TEACHER_CKPT
    save_checkpoint(path, cfg.fingerprint("teacher"),
                    {"teacher": {"width": tcfg.width, "mlp_mult": tcfg.mlp_mult}},
                    {"teacher": net.param_arrays()})
    with (out_dir / TEACHER_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "wall_ms"])
        for step, loss, ms in rows:
            writer.writerow([step, repr(loss), f"{ms:.3f}"])
    write_resolved_config(cfg, out_dir, "train-teacher")
    return path


def load_teacher(cfg: RunConfig, world: World, path: Path) -> DenoiserNet:
    fingerprint, meta, blocks = load_checkpoint(path)
    if fingerprint != cfg.fingerprint("teacher"):
        raise CheckpointError(f"{path}: teacher fingerprint mismatch with current config")
    net = build_denoiser(world, int(meta["teacher"]["width"]), int(meta["teacher"]["mlp_mult"]),
                         cfg["seed"])
    net.load_param_arrays(blocks["teacher"])
    net.set_trainable(False)
    return net


# ---------------------------------------------------------------------------
# distill


@dataclass
class DistillState:
    student: DenoiserNet
    disc: Discriminator | None
    student_opt: RmsScaledSgd
    disc_opt: RmsScaledSgd | None
    rng: RngStream
    step: int


def init_distill_state(cfg: RunConfig, world: World, teacher: DenoiserNet) -> DistillState:
    dcfg = cfg.distill_cfg()
    student = build_student(teacher)
    disc = build_discriminator(world, dcfg, cfg["seed"]) if dcfg.lambda_gan > 0 else None
    student_opt = RmsScaledSgd(student.params, lr=dcfg.lr)
    disc_opt = RmsScaledSgd(disc.params, lr=dcfg.disc_lr) if disc is not None else None
    rng = RngStream(child_seed(cfg["seed"], "distill"))
    return DistillState(student, disc, student_opt, disc_opt, rng, step=0)


def save_student(cfg: RunConfig, state: DistillState, path: Path) -> None:
    meta = {
        "distill": {
            "step": state.step,
            "rng_state": state.rng.get_state(),
            "width": state.student.width,
            "mlp_mult": state.student.mlp_mult,
            "has_disc": state.disc is not None,
        }
    }
    blocks = {
        "student": state.student.param_arrays(),
        "student-opt": state.student_opt.state_arrays(),
    }
    if state.disc is not None:
        blocks["discriminator"] = state.disc.param_arrays()
        blocks["disc-opt"] = state.disc_opt.state_arrays()
    save_checkpoint(path, cfg.fingerprint("student"), meta, blocks)


def load_distill_state(cfg: RunConfig, world: World, teacher: DenoiserNet,
                       path: Path) -> DistillState:
    fingerprint, meta, blocks = load_checkpoint(path)
    if fingerprint != cfg.fingerprint("student"):
        raise CheckpointError(f"{path}: student fingerprint mismatch with current config")
    state = init_distill_state(cfg, world, teacher)
    state.student.load_param_arrays(blocks["student"])
    state.student_opt.load_state_arrays(blocks["student-opt"])
    if meta["distill"]["has_disc"]:
        state.disc.load_param_arrays(blocks["discriminator"])
        state.disc_opt.load_state_arrays(blocks["disc-opt"])
    state.rng.set_state(meta["distill"]["rng_state"])
    state.step = int(meta["distill"]["step"])
    return state


def run_distill(cfg: RunConfig, out_dir: Path, world_path: Path | None = None,
                teacher_path: Path | None = None, resume: Path | None = None,
                stop_after: int | None = None) -> Path:
    """Distill to cfg's step budget; `stop_after` emulates an interruption
    (checkpoint saved mid-run, resumable bit-exactly)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    world = load_world(cfg, world_path or out_dir / WORLD_CKPT)
    teacher = load_teacher(cfg, world, teacher_path or out_dir / TEACHER_CKPT)
    dcfg = cfg.distill_cfg()
    drift_cfg = cfg.drift_cfg()
    target = dcfg.steps if stop_after is None else min(stop_after, dcfg.steps)

    if resume is not None:
        state = load_distill_state(cfg, world, teacher, resume)
    else:
        state = init_distill_state(cfg, world, teacher)

    csv_path = out_dir / DISTILL_CSV
    mode = "a" if (resume is not None and csv_path.exists()) else "w"
    with csv_path.open(mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "drift_loss", "gan_gen", "gan_disc", "fp_residual", "wall_ms"])
        while state.step < target:
            classes = state.rng.integers(0, world.params.classes, size=dcfg.batch).astype(np.int64)
            m = distill_step(world, cfg.schedule(), teacher, state.student, state.disc,
                             dcfg, drift_cfg, classes, state.rng, state.student_opt,
                             state.disc_opt)
            writer.writerow([
                state.step,
                repr(m["drift_loss"]),
                "" if m["gan_gen"] is None else repr(m["gan_gen"]),
                "" if m["gan_disc"] is None else repr(m["gan_disc"]),
                repr(m["fp_residual"]),
                f"{m['wall_ms']:.3f}",
            ])
            state.step += 1

    path = out_dir / STUDENT_CKPT
    save_student(cfg, state, path)
    write_resolved_config(cfg, out_dir, "distill")
    return path


def load_student(cfg: RunConfig, world: World, teacher: DenoiserNet, path: Path) -> DenoiserNet:
    state = load_distill_state(cfg, world, teacher, path)
    state.student.set_trainable(False)
    return state.student


# ---------------------------------------------------------------------------
# eval


def teacher_sampler(net: DenoiserNet, schedule: NoiseSchedule, length: int, steps: int,
                    confidence: ConfidenceRule):
    plan = SamplerPlan.build(steps, schedule, length)

    def sampler(cls: int, n: int, rng: RngStream) -> np.ndarray:
        classes = np.full(n, cls, dtype=np.int64)
        return sample_iterative_batch(net, classes, plan, rng, confidence=confidence)

    return sampler


def student_sampler(net: DenoiserNet, world: World, schedule: NoiseSchedule,
                    dcfg: DistillConfig):
    def sampler(cls: int, n: int, rng: RngStream) -> np.ndarray:
        classes = np.full(n, cls, dtype=np.int64)
        return student_sample_batch(net, world, schedule, dcfg, classes, rng)

    return sampler


def pooled_features(world: World, tokens: np.ndarray, classes: np.ndarray,
                    taps: tuple[int, ...]) -> np.ndarray:
    """Tap-averaged, cell-pooled feature vectors (n, F) for Fréchet scoring."""
    pixels = world.decode_tokens(tokens, classes)
    feats = world.lift(pixels, taps, spatial=False).values  # (n, T, 1, F)
    return feats.mean(axis=1)[:, 0, :]


def run_eval(cfg: RunConfig, out_dir: Path, world_path: Path | None = None,
             teacher_path: Path | None = None, student_path: Path | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    world = load_world(cfg, world_path or out_dir / WORLD_CKPT)
    teacher = load_teacher(cfg, world, teacher_path or out_dir / TEACHER_CKPT)
    schedule = cfg.schedule()
    dcfg = cfg.distill_cfg()
    drift_cfg = cfg.drift_cfg()
    eval_seed = cfg.eval_seed()

    if cfg["eval.model"] == "student":
        model = load_student(cfg, world, teacher, student_path or out_dir / STUDENT_CKPT)
        sampler = student_sampler(model, world, schedule, dcfg)
        fingerprint = cfg.fingerprint("student")
    else:
        model = teacher
        sampler = teacher_sampler(teacher, schedule, world.params.length,
                                  cfg["eval.teacher_T"], cfg.eval_confidence())
        fingerprint = cfg.fingerprint("teacher")

    report = EvalReport(seed=eval_seed, config_fingerprint=fingerprint,
                        sample_count=cfg["eval.n_samples"])

    p = world.params
    if p.vocab**p.length <= 100_000:
        _, per_class = mean_tv(sampler, world, cfg["eval.n_samples"], eval_seed)
        report.tv_by_condition = per_class

    n_frechet = cfg["eval.frechet_n"]
    rng = RngStream(child_seed(eval_seed, "eval-frechet"))
    classes = rng.integers(0, p.classes, size=n_frechet).astype(np.int64)
    fake_tokens = np.concatenate(
        [sampler(cls, int((classes == cls).sum()), rng) for cls in range(p.classes)
         if (classes == cls).any()])
    fake_classes = np.concatenate(
        [np.full(int((classes == cls).sum()), cls, dtype=np.int64) for cls in range(p.classes)
         if (classes == cls).any()])
    real_tokens = world.dataset.sample_batch(fake_classes, rng)
    fake_feats = pooled_features(world, fake_tokens, fake_classes, drift_cfg.taps)
    real_feats = pooled_features(world, real_tokens, fake_classes, drift_cfg.taps)
    report.frechet, report.frechet_regularized = frechet_proxy(fake_feats, real_feats,
                                                               return_flag=True)

    report.fp_residual = fixed_point_residual(
        model, teacher, world, schedule, dcfg, drift_cfg, cfg["eval.fp_n"],
        RngStream(child_seed(eval_seed, "eval-fp")))

    report_path = out_dir / REPORT_TXT
    _atomic_write(report_path, report.to_text())

    dump_n = cfg["eval.dump_n"]
    rng = RngStream(child_seed(eval_seed, "eval-dump"))
    dump_classes = rng.integers(0, p.classes, size=dump_n).astype(np.int64)
    rows = []
    for cls in range(p.classes):
        count = int((dump_classes == cls).sum())
        if count == 0:
            continue
        toks = sampler(cls, count, rng)
        pix = world.decode_tokens(toks, np.full(count, cls, dtype=np.int64)).values
        for row in pix:
            rows.append((cls, row))
    with (out_dir / SAMPLES_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"p{i}" for i in range(p.pixel_dim)])
        for cls, row in rows:
            writer.writerow([cls] + [repr(v) for v in row])
    write_resolved_config(cfg, out_dir, "eval")
    return report_path
