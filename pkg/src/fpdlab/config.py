"""Flat key=value run configuration with namespaced keys and fingerprints."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .distill import DistillConfig
from .drift import DriftConfig
from .masking import NoiseSchedule
from .teacher import ConfidenceRule, TeacherTrainConfig
from .toyworld import WorldParams


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    hint: str = ""


def _choice(*options):
    return Key(str, options[0], lambda v: v in options, f"one of {options}")


KEYS: dict[str, Key] = {
    "seed": Key(int, 0),
    "out_tag": Key(str, "run"),
    # frozen world
    "world.K": Key(int, 16, lambda v: v >= 1, ">= 1"),
    "world.L": Key(int, 16, lambda v: v >= 1, ">= 1"),
    "world.d": Key(int, 8, lambda v: v >= 1, ">= 1"),
    "world.P": Key(int, 32, lambda v: v >= 1, ">= 1"),
    "world.F": Key(int, 24, lambda v: v >= 1, ">= 1"),
    "world.G": Key(int, 2, lambda v: v >= 1, ">= 1"),
    "world.C": Key(int, 4, lambda v: v >= 1, ">= 1"),
    "world.rho": Key(float, 0.1, lambda v: 0.0 <= v <= 1.0, "in [0,1]"),
    # noise schedule
    "schedule.kind": _choice("cosine", "linear"),
    # teacher pretraining
    "teacher.steps": Key(int, 5000, lambda v: v >= 1, ">= 1"),
    "teacher.batch": Key(int, 64, lambda v: v >= 1, ">= 1"),
    "teacher.lr": Key(float, 3e-3, lambda v: v > 0, "> 0"),
    "teacher.width": Key(int, 64, lambda v: v >= 4, ">= 4"),
    "teacher.mlp_mult": Key(int, 3, lambda v: v >= 1, ">= 1"),
    # distillation
    "distill.steps": Key(int, 2000, lambda v: v >= 1, ">= 1"),
    "distill.batch": Key(int, 8, lambda v: v >= 2, ">= 2"),
    "distill.lr": Key(float, 1e-4, lambda v: v > 0, "> 0"),
    "distill.disc_lr": Key(float, 1e-4, lambda v: v > 0, "> 0"),
    "distill.disc_hidden": Key(int, 32, lambda v: v >= 1, ">= 1"),
    "distill.r_init": Key(float, 0.95, lambda v: 0.0 < v <= 1.0, "in (0,1]"),
    "distill.r_lo": Key(float, 0.3, lambda v: 0.0 < v < 1.0, "in (0,1)"),
    "distill.r_hi": Key(float, 0.7, lambda v: 0.0 < v < 1.0, "in (0,1)"),
    "distill.lambda_gan": Key(float, 0.0, lambda v: v >= 0.0, ">= 0"),
    "distill.refinement_source": _choice("student", "random"),
    "distill.estimator": _choice("ste", "soft"),
    "distill.refine_mode": _choice("sample", "argmax"),
    # drift objective
    "drift.bandwidths": Key(_parse_floats, (0.02, 0.05, 0.2),
                            lambda v: len(v) > 0 and all(h > 0 for h in v), "positive floats"),
    "drift.eps_rms": Key(float, 1e-8, lambda v: v > 0, "> 0"),
    "drift.space": _choice("feature", "pixel"),
    "drift.taps": Key(_parse_ints, (1, 2, 3, 4),
                      lambda v: len(v) > 0 and all(1 <= t <= 4 for t in v), "subset of 1..4"),
    "drift.spatial": Key(_parse_bool, True),
    # evaluation
    "eval.model": _choice("student", "teacher"),
    "eval.teacher_T": Key(int, 8, lambda v: v >= 1, ">= 1"),
    "eval.n_samples": Key(int, 20000, lambda v: v >= 1, ">= 1"),
    "eval.frechet_n": Key(int, 2000, lambda v: v >= 2, ">= 2"),
    "eval.fp_n": Key(int, 128, lambda v: v >= 1, ">= 1"),
    "eval.dump_n": Key(int, 256, lambda v: v >= 0, ">= 0"),
    "eval.seed": Key(int, -1),  # -1: derive from the global seed
    "eval.confidence": _choice("gumbel", "prob", "random"),
    "eval.gumbel_temp": Key(float, 4.5, lambda v: v >= 0, ">= 0"),
}

# namespaces hashed into each artifact's fingerprint
FINGERPRINT_SECTIONS = {
    "world": ("seed", "world."),
    "teacher": ("seed", "world.", "schedule.", "teacher."),
    "student": ("seed", "world.", "schedule.", "teacher.", "distill.", "drift."),
}


class RunConfig:
    """Resolved configuration: every known key has a value."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        if values:
            for k, v in values.items():
                self.set(k, v, raw=False)

    # -- mutation ------------------------------------------------------------

    def set(self, key: str, value: Any, raw: bool = True) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        spec = KEYS[key]
        if raw:
            try:
                value = spec.parse(str(value))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid value for {key}: {exc}") from None
        if not spec.check(value):
            hint = f" (expected {spec.hint})" if spec.hint else ""
            raise ConfigError(f"invalid value for {key}: {value!r}{hint}")
        self.values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    # -- I/O -------------------------------------------------------------------

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, value = stripped.partition("=")
            cfg.set(key.strip(), value.strip())
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            cfg.set(key.strip(), value.strip())
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.values["distill.r_lo"] < self.values["distill.r_hi"]:
            raise ConfigError("invalid value for distill.r_lo: must be < distill.r_hi")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def section_text(self, prefixes: tuple[str, ...]) -> str:
        keys = [
            k for k in sorted(self.values)
            if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)
        ]
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in keys)

    def fingerprint(self, kind: str) -> str:
        prefixes = FINGERPRINT_SECTIONS[kind]
        return hashlib.sha256(self.section_text(prefixes).encode()).hexdigest()

    # -- typed views -----------------------------------------------------------

    def world_params(self) -> WorldParams:
        v = self.values
        return WorldParams(
            vocab=v["world.K"], length=v["world.L"], embed_dim=v["world.d"],
            pixel_dim=v["world.P"], feat_dim=v["world.F"], grid=v["world.G"],
            classes=v["world.C"], rho=v["world.rho"],
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.values["schedule.kind"])

    def teacher_cfg(self) -> TeacherTrainConfig:
        v = self.values
        return TeacherTrainConfig(
            steps=v["teacher.steps"], batch=v["teacher.batch"], lr=v["teacher.lr"],
            width=v["teacher.width"], mlp_mult=v["teacher.mlp_mult"],
        )

    def distill_cfg(self) -> DistillConfig:
        v = self.values
        return DistillConfig(
            r_init=v["distill.r_init"], r_lo=v["distill.r_lo"], r_hi=v["distill.r_hi"],
            lambda_gan=v["distill.lambda_gan"],
            refinement_source=v["distill.refinement_source"],
            estimator=v["distill.estimator"], refine_mode=v["distill.refine_mode"],
            batch=v["distill.batch"], steps=v["distill.steps"], lr=v["distill.lr"],
            disc_lr=v["distill.disc_lr"], disc_hidden=v["distill.disc_hidden"],
        )

    def drift_cfg(self) -> DriftConfig:
        v = self.values
        return DriftConfig(
            bandwidths=v["drift.bandwidths"], eps_rms=v["drift.eps_rms"],
            space=v["drift.space"], taps=v["drift.taps"], spatial=v["drift.spatial"],
        )

    def eval_confidence(self) -> ConfidenceRule:
        return ConfidenceRule(self.values["eval.confidence"], self.values["eval.gumbel_temp"])

    def eval_seed(self) -> int:
        s = self.values["eval.seed"]
        return self.values["seed"] if s == -1 else s
