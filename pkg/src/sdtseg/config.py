"""JSON run configuration.

A run config is a single JSON object::

    {
      "out_dir": "runs/demo",
      "data_dir": null,
      "train": {"epochs": 50, "lambda": 2.0, "seed": 1, ...},
      "sdt": {"clip": 32, "void_policy": "exclude-from-loss"},
      "synth": {"size": 128, "classes": 5, "count": 250, ...}
    }

Every key is optional and takes the dataclass default; unknown keys are
rejected. ``data_dir`` points at a dataset written by ``sdtseg synth``; when
absent the dataset is generated from the ``synth`` section.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .edt import SdtParams
from .synth import SynthSpec
from .trainer import TrainConfig

# JSON key -> dataclass field, where the two differ
_TRAIN_ALIASES = {"lambda": "lam"}
_SDT_KEYS = ("clip", "void_policy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    out_dir: Path = Path("runs/default")
    data_dir: Path | None = None

    @property
    def sdt(self) -> SdtParams:
        return SdtParams(self.synth.classes, self.train.clip, self.train.void_policy)

    def to_dict(self) -> dict:
        train = {k: v for k, v in dataclasses.asdict(self.train).items() if k not in _SDT_KEYS}
        train["lambda"] = train.pop("lam")
        train["lr_milestones"] = list(train["lr_milestones"])
        synth = dataclasses.asdict(self.synth)
        synth = {k: list(v) if isinstance(v, tuple) else v for k, v in synth.items()}
        return {
            "out_dir": str(self.out_dir),
            "data_dir": None if self.data_dir is None else str(self.data_dir),
            "train": train,
            "sdt": {"clip": self.train.clip, "void_policy": self.train.void_policy},
            "synth": synth,
        }


def _section(raw, name: str, allowed: set[str], aliases: dict[str, str] | None = None) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    aliases = aliases or {}
    out = {}
    for key, value in raw.items():
        target = aliases.get(key, key)
        if target not in allowed or key in aliases.values():
            raise ConfigError(f"unknown key {name}.{key}")
        out[target] = value
    return out


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"out_dir", "data_dir", "train", "sdt", "synth"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - set(_SDT_KEYS)
    train = _section(doc.get("train"), "train", train_fields, _TRAIN_ALIASES)
    train.update(_section(doc.get("sdt"), "sdt", set(_SDT_KEYS)))
    synth = _section(doc.get("synth"), "synth", {f.name for f in dataclasses.fields(SynthSpec)})
    try:
        if "lr_milestones" in train:
            train["lr_milestones"] = tuple(train["lr_milestones"])
        cfg = RunConfig(
            train=TrainConfig(**train),
            synth=SynthSpec(**synth),
            out_dir=Path(doc.get("out_dir") or "runs/default"),
            data_dir=None if doc.get("data_dir") is None else Path(doc["data_dir"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_run_config(doc)
