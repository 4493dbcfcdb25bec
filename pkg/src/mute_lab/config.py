"""Flat key=value run configuration.

One file drives a whole run: task, model, and trainer settings share a
single namespace with documented defaults.  Unknown keys are rejected
rather than ignored, and the fully resolved settings are echoed to
``config.resolved`` in the output directory so a run is reproducible
from its artifacts alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig, default_noises
from .multiunit import NoiseKind
from .tasks import TaskSpec
from .trainer import TrainConfig

ENV_SEED = "MUTE_SEED"


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v: str):
    low = v.strip().lower()
    return None if low in ("none", "") else float(v)


# key -> (caster, default); the single source of truth for documentation
SCHEMA = {
    "task": (str, "copy"),
    "vocab": (int, 20),
    "min_len": (int, 5),
    "max_len": (int, 12),
    "d": (int, 64),
    "d_ff": (int, 256),
    "heads": (int, 4),
    "n_enc": (int, 2),
    "n_dec": (int, 2),
    "units": (int, 4),
    "mode": (str, "seq_biased"),
    "noises": (str, "auto"),
    "sample_rate": (float, 0.85),
    "clip": (int, 8),
    "dropout": (float, 0.1),
    "label_smooth": (float, 0.1),
    "penalty_weight": (float, 0.1),
    "max_seq": (int, 64),
    "share_unit_attention": (_bool, False),
    "share_unit_ffn": (_bool, False),
    "max_steps": (int, 5000),
    "batch_tokens": (int, 832),
    "warmup": (int, 400),
    "lr_factor": (float, 2.0),
    "clip_norm": (float, 5.0),
    "pairs_per_epoch": (int, 2048),
    "eval_pairs": (int, 256),
    "log_interval": (int, 50),
    "eval_interval": (int, 500),
    "checkpoint_interval": (int, 1000),
    "log_speed": (_bool, False),
    "early_stop_token_acc": (_opt_float, None),
    "early_stop_exact": (_opt_float, None),
    "seed": (int, 1),
    "out_dir": (str, "runs/default"),
}


@dataclass
class RunConfig:
    task: TaskSpec
    model: ModelConfig
    train: TrainConfig
    out_dir: str
    seed: int
    raw: dict

    def resolved_text(self) -> str:
        return "".join(f"{k}={_fmt(self.raw[k])}\n" for k in sorted(self.raw))

    def write_resolved(self) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, "config.resolved")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.resolved_text())
        return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return str(v)


def parse_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = body.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve(file_values: dict | None = None,
            overrides: dict | None = None) -> RunConfig:
    """Merge defaults < environment seed < file < overrides."""
    merged = {k: default for k, (_, default) in SCHEMA.items()}
    if ENV_SEED in os.environ:
        merged["seed"] = os.environ[ENV_SEED]
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            merged[key] = value
    typed = {}
    for key, value in merged.items():
        caster = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = caster(value)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        typed[key] = value

    task = TaskSpec(kind=typed["task"], vocab=typed["vocab"],
                    min_len=typed["min_len"], max_len=typed["max_len"],
                    seed=typed["seed"])
    if typed["max_len"] + 2 > typed["max_seq"]:
        raise ConfigError("max_seq too small for the task lengths")
    if typed["noises"] == "auto":
        noises = default_noises(typed["units"])
    else:
        noises = tuple(NoiseKind.parse(s)
                       for s in typed["noises"].split(","))
    model = ModelConfig(
        d=typed["d"], d_ff=typed["d_ff"], heads=typed["heads"],
        n_enc=typed["n_enc"], n_dec=typed["n_dec"], units=typed["units"],
        mode=typed["mode"], noises=noises, sample_rate=typed["sample_rate"],
        clip=typed["clip"], dropout=typed["dropout"],
        label_smooth=typed["label_smooth"],
        penalty_weight=typed["penalty_weight"],
        src_vocab=task.model_vocab, tgt_vocab=task.model_vocab,
        max_len=typed["max_seq"],
        share_unit_attention=typed["share_unit_attention"],
        share_unit_ffn=typed["share_unit_ffn"])
    train = TrainConfig(
        max_steps=typed["max_steps"], batch_tokens=typed["batch_tokens"],
        warmup=typed["warmup"], lr_factor=typed["lr_factor"],
        clip_norm=typed["clip_norm"],
        pairs_per_epoch=typed["pairs_per_epoch"],
        eval_pairs=typed["eval_pairs"], log_interval=typed["log_interval"],
        eval_interval=typed["eval_interval"],
        checkpoint_interval=typed["checkpoint_interval"], seed=typed["seed"],
        log_speed=typed["log_speed"],
        early_stop_token_acc=typed["early_stop_token_acc"],
        early_stop_exact=typed["early_stop_exact"])
    echo = dict(typed)
    echo["noises"] = ",".join(str(k) for k in noises)
    return RunConfig(task=task, model=model, train=train,
                     out_dir=typed["out_dir"], seed=typed["seed"], raw=echo)
