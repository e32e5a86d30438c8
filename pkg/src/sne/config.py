"""Flat ``key=value`` run configuration for the ``train`` subcommand.

Recognized keys are every :class:`TrainSchedule` field, every
:class:`SneConfig` key (``state_dim``, ``cell``, ``skip``,
``source_offsets`` ...) and the run keys below::

    seed=7
    quality=0.15
    corpus=desk            # or comma-separated PGM/PPM paths
    val=desk               # optional held-out images, same syntax
    augment=1
    workers=1

``corpus=desk`` / ``val=desk`` select the built-in procedural training and
held-out splits. Relative paths resolve against the config file's directory.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from sne.checkpoint import parse_kv
from sne.errors import ParameterError
from sne.estimator import SneConfig, _flag
from sne.trainer import TrainSchedule

RUN_KEYS = ("seed", "quality", "corpus", "val", "augment", "workers")
MODEL_KEYS = tuple(SneConfig().to_dict())
SCHEDULE_KEYS = tuple(f.name for f in fields(TrainSchedule))


@dataclass
class RunConfig:
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    model: SneConfig = field(default_factory=SneConfig)
    seed: int = 0
    quality: float = 1.0
    corpus: tuple[str, ...] = ("desk",)
    val: tuple[str, ...] = ()
    augment: bool = False
    workers: int = 1


def _schedule_value(name: str, text: str):
    default = getattr(TrainSchedule, name, None)
    if name in ("lr_sgd", "K_decode") and text.strip().lower() in ("", "none"):
        return None
    if name == "reg_comm_uses_err_matrix":
        return _flag(text)
    if name in ("lr_sgd",) or isinstance(default, float):
        return float(text)
    return int(text)


def _paths(text: str, base: Path) -> tuple[str, ...]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    return tuple(t if t == "desk" else str((base / t).resolve()) for t in items)


def parse_run_config(text: str, base_dir=".") -> RunConfig:
    kv = parse_kv(text)
    unknown = sorted(set(kv) - set(RUN_KEYS) - set(MODEL_KEYS) - set(SCHEDULE_KEYS))
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    base = Path(base_dir)
    try:
        sched = TrainSchedule(**{k: _schedule_value(k, v) for k, v in kv.items() if k in SCHEDULE_KEYS})
        model = SneConfig.from_dict({k: v for k, v in kv.items() if k in MODEL_KEYS})
        return RunConfig(
            schedule=sched,
            model=model,
            seed=int(kv.get("seed", 0)),
            quality=float(kv.get("quality", 1.0)),
            corpus=_paths(kv.get("corpus", "desk"), base),
            val=_paths(kv.get("val", ""), base),
            augment=_flag(kv.get("augment", "0")),
            workers=int(kv.get("workers", 1)),
        )
    except ValueError as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"bad config value: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(encoding="utf-8"), path.parent)
