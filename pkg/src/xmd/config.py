"""Flat ``section.key = value`` run configuration.

Example::

    # desk-scale comparison
    run.experiment_id = compare-nuscenes
    run.seed = 3
    scenario.superpixels_per_batch = 512
    scenario.points_per_superpixel = 2, 6
    scenario.class_proportions = nuscenes
    train.variant = st
    train.k_percent = 1
    eval.per_class = 160
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .synth import Scenario, nuscenes_like_proportions
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    per_class: int = 160  # superpixels per class in the balanced probe batch
    ridge_lambda: float = 1e-3
    minority_threshold: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "out"
    experiment_id: str = "run"
    seed: int = 0

    def __post_init__(self):
        if not self.experiment_id:
            raise ValueError("experiment_id must be nonempty")

    def seeded(self, seed: int) -> "RunConfig":
        """Route one seed into every consumer (data, init, probe split)."""
        return replace(
            self,
            seed=seed,
            scenario=replace(self.scenario, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        content = dataclasses.asdict(self)
        del content["output_dir"]
        payload = json.dumps(content, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SECTIONS = {"scenario": Scenario, "train": TrainConfig, "eval": EvalConfig}
_RUN_KEYS = {"output_dir", "experiment_id", "seed"}


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    if low in ("none", "null"):
        return None
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_lines(lines) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {"run": {}, **{s: {} for s in _SECTIONS}}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if "." not in key:
            raise ValueError(f"line {lineno}: key {key!r} lacks a section")
        section, name = key.split(".", 1)
        if section not in out:
            raise ValueError(f"line {lineno}: unknown section {section!r}")
        out[section][name] = parse_value(value)
    return out


def _build(cls, values: dict[str, Any], base=None):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    props = values.get("class_proportions")
    if props == "nuscenes":
        values = {**values, "class_proportions": tuple(nuscenes_like_proportions())}
    elif props == "uniform":
        n = values.get("num_classes", base.num_classes if base is not None else Scenario().num_classes)
        values = {**values, "class_proportions": tuple([1.0 / n] * n)}
    elif props is not None and not isinstance(props, tuple):
        values = {**values, "class_proportions": (props,)}
    return replace(base, **values) if base is not None else cls(**values)


def load_config(path=None, overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    sections = parse_lines(Path(path).read_text().splitlines()) if path else parse_lines([])
    for section, values in (overrides or {}).items():
        sections.setdefault(section, {}).update(values)
    run = sections["run"]
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ValueError(f"unknown run keys: {sorted(unknown)}")
    cfg = RunConfig(
        scenario=_build(Scenario, sections["scenario"]),
        train=_build(TrainConfig, sections["train"]),
        evaluation=_build(EvalConfig, sections["eval"]),
        **run,
    )
    return cfg.seeded(cfg.seed)
