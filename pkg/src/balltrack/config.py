"""Run configuration: one flat dotted-key namespace with defaults,
overridable by a plain-text config file and then by command-line flags.

File format: `key = value` lines, `#` comments, blank lines allowed; an
empty file is valid.  Precedence is flag > file > default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .evalkit import EvalConfig
from .pipeline import ModelConfig, PipelineVariant
from .rstr import TsattConfig
from .supervision import DEFAULT_RADIUS
from .synthgen import SceneConfig
from .trainkit import TrainConfig

# every key has a default; tuples are comma-separated; None parses from "none"
DEFAULTS: dict[str, object] = {
    "variant": "v5",
    "seed": 0,
    "synth.sequences": 10,
    "scene.width": 64,
    "scene.height": 48,
    "scene.frames": 120,
    "scene.ball_radius": 2.2,
    "scene.speed_min": 1.2,
    "scene.speed_max": 2.4,
    "scene.ball_color": (0.95, 0.90, 0.25),
    "scene.background": (0.13, 0.30, 0.16),
    "scene.decoys": 3,
    "scene.decoy_dim": 0.85,
    "scene.occluders": 2,
    "scene.occluder_color": (0.45, 0.45, 0.50),
    "scene.veils": 1,
    "scene.veil_alpha": 0.6,
    "scene.veil_color": (0.05, 0.10, 0.05),
    "scene.noise_sigma": 0.02,
    "backbone.widths": (8, 16, 32, 64),
    "tsatt.patch": 8,
    "tsatt.dim": 16,
    "tsatt.heads": 4,
    "tsatt.mask_rate": 0.1,
    "tsatt.temporal_first": True,
    "mdd.eps": 1e-6,
    "mdd.per_polarity": False,
    "gt.radius": DEFAULT_RADIUS,
    "train.lr": 1e-4,
    "train.batch_size": 2,
    "train.epochs": 30,
    "train.milestones": (20, 25),
    "train.gamma": 0.1,
    "train.weight_decay": 1e-2,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.grad_clip": None,
    "eval.tolerance": 4.0,
    "eval.threshold": 0.5,
    "eval.scale_x": 1.0,
    "eval.scale_y": 1.0,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.seeds": 5,
}


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str, template) -> object:
    text = text.strip()
    if template is None:  # grad_clip style: None default, float override
        return None if text.lower() in ("none", "") else float(text)
    if isinstance(template, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def coerce(key: str, text: str) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key {key!r}")
    template = DEFAULTS[key]
    if isinstance(template, tuple):
        items = [t for t in text.replace(",", " ").split() if t]
        item_template = template[0] if template else 0
        return tuple(_parse_scalar(t, item_template) for t in items)
    return _parse_scalar(text, template)


def parse_config_file(path: Path) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = coerce(key.strip(), value)
    return values


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def resolve(cls, config_file: Path | None = None,
                overrides: dict[str, object] | None = None) -> "RunConfig":
        """Merge defaults, then the config file, then flag overrides."""
        values = dict(DEFAULTS)
        if config_file is not None:
            values.update(parse_config_file(config_file))
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            values[key] = coerce(key, value) if isinstance(value, str) else value
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    # -- typed views --

    def scene(self) -> SceneConfig:
        v = self.values
        return SceneConfig(
            width=v["scene.width"], height=v["scene.height"],
            frames=v["scene.frames"], ball_radius=v["scene.ball_radius"],
            speed_min=v["scene.speed_min"], speed_max=v["scene.speed_max"],
            ball_color=v["scene.ball_color"], background=v["scene.background"],
            decoys=v["scene.decoys"], decoy_dim=v["scene.decoy_dim"],
            occluders=v["scene.occluders"],
            occluder_color=v["scene.occluder_color"],
            veils=v["scene.veils"], veil_alpha=v["scene.veil_alpha"],
            veil_color=v["scene.veil_color"],
            noise_sigma=v["scene.noise_sigma"], seed=v["seed"])

    def tsatt(self) -> TsattConfig:
        v = self.values
        return TsattConfig(patch=v["tsatt.patch"], dim=v["tsatt.dim"],
                           heads=v["tsatt.heads"], mask_rate=v["tsatt.mask_rate"],
                           temporal_first=v["tsatt.temporal_first"])

    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            variant=PipelineVariant(v["variant"]),
            height=v["scene.height"], width=v["scene.width"],
            widths=tuple(v["backbone.widths"]), tsatt=self.tsatt(),
            mdd_eps=v["mdd.eps"], mdd_per_polarity=v["mdd.per_polarity"],
            seed=v["seed"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["train.lr"], batch_size=v["train.batch_size"],
            epochs=v["train.epochs"], milestones=tuple(v["train.milestones"]),
            gamma=v["train.gamma"], weight_decay=v["train.weight_decay"],
            beta1=v["train.beta1"], beta2=v["train.beta2"], eps=v["train.eps"],
            grad_clip=v["train.grad_clip"], seed=v["seed"])

    def eval(self) -> EvalConfig:
        v = self.values
        return EvalConfig(tolerance=v["eval.tolerance"],
                          threshold=v["eval.threshold"],
                          scale_x=v["eval.scale_x"], scale_y=v["eval.scale_y"])

    def as_flat_strings(self) -> dict[str, str]:
        out = {}
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                out[key] = ",".join(str(x) for x in value)
            else:
                out[key] = str(value)
        return out
