"""Pipeline configuration: a JSON file validated against ``CONFIG_SCHEMA``.

Unknown keys are rejected. Relative paths are resolved against the directory
holding the config file.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .ik_augment import PRESET_SPACES, TargetSamplingSpace
from .physics_correct import PlausibilityThresholds, RewardWeights


class ConfigError(ValueError):
    pass


_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_NUM_OR_LIST = {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                          {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


CONFIG_SCHEMA = _obj({
    "corpus": {"type": "string"},
    "output_dir": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "multiplier": {"type": "integer", "minimum": 0},
    "resample_hz": {"type": "number", "exclusiveMinimum": 0},
    "synthesis": _obj({"ik": {"type": "boolean"}, "latent": {"type": "boolean"}}),
    "chain": _obj({"base": {"type": "string"}, "end": {"type": "string"}}, ["base", "end"]),
    "sampling_spaces": {
        "type": "object",
        "additionalProperties": _obj(
            {"radial_range": _RANGE, "height_range": _RANGE, "angle_range": _RANGE},
            ["radial_range", "height_range", "angle_range"],
        ),
    },
    "default_space": {"type": "string"},
    "fabrik": _obj({"tolerance": {"type": "number", "exclusiveMinimum": 0},
                    "max_iters": {"type": "integer", "minimum": 1}}),
    "time_warp": _obj({"enabled": {"type": "boolean"}, "range": _RANGE}),
    "latent": _obj({
        "embeddings": {"type": "string"},
        "decoder": {"type": "string"},
        "n_c": {"type": "integer", "minimum": 1},
        "n_s": {"type": "integer", "minimum": 1},
        "reuse_gaussian": {"type": "boolean"},
    }),
    "controller": _obj({
        "dt": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.01},
        "substeps": {"type": "integer", "minimum": 1},
        "inertia": _NUM_OR_LIST,
        "kp": _NUM_OR_LIST,
        "kd": _NUM_OR_LIST,
        "torque_limit": _NUM_OR_LIST,
        "root_mass": {"type": "number", "exclusiveMinimum": 0},
        "root_kp": {"type": "number", "exclusiveMinimum": 0},
        "root_kd": {"type": "number", "exclusiveMinimum": 0},
        "residual_force_limit": {"type": "number", "exclusiveMinimum": 0},
        "gravity": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "ground_height": {"type": "number"},
        "use_residual": {"type": "boolean"},
        "reward": _obj({"w_pose": {"type": "number"}, "w_root": {"type": "number"},
                        "a_pose": {"type": "number"}, "a_root": {"type": "number"}}),
    }),
    "validation": _obj({
        "ground_height": {"type": "number"},
        "ground_eps": {"type": "number", "minimum": 0},
        "contact_height": {"type": "number", "minimum": 0},
        "foot_speed_max": {"type": "number", "exclusiveMinimum": 0},
        "bone_radius": {"type": "number", "minimum": 0},
        "angular_speed_max": {"type": "number", "exclusiveMinimum": 0},
        "foot_joints": {"type": "array", "items": {"type": "string"}},
    }),
    "debias": _obj({
        "kind": {"enum": ["affine", "mlp"]},
        "lambda": {"type": "number", "minimum": 0},
        "hidden": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "per_class": {"type": "boolean"},
    }),
    "metrics": _obj({"bandwidth": {"type": ["number", "null"], "exclusiveMinimum": 0}}),
    "figures": {"type": "boolean"},
})

DEFAULTS = {
    "multiplier": 10,
    "resample_hz": 30.0,
    "synthesis": {"ik": True, "latent": False},
    "sampling_spaces": {},
    "fabrik": {"tolerance": 1e-4, "max_iters": 100},
    "time_warp": {"enabled": False, "range": [0.9, 1.1]},
    "latent": {"n_c": 3, "n_s": 2, "reuse_gaussian": False},
    "controller": {"dt": 1.0 / 300.0, "substeps": 10, "inertia": 0.75, "kp": 300.0, "kd": 30.0,
                   "torque_limit": 200.0, "root_mass": 60.0, "root_kp": 500.0, "root_kd": 50.0,
                   "residual_force_limit": 300.0, "gravity": [0.0, -9.81, 0.0], "ground_height": 0.0,
                   "use_residual": True, "reward": {}},
    "validation": {},
    "debias": {"kind": "affine", "lambda": 1e-6, "hidden": 512, "epochs": 500, "per_class": False},
    "metrics": {"bandwidth": None},
    "figures": True,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    # -- accessors ----------------------------------------------------------
    def path(self, key: str, section: str | None = None) -> Path | None:
        src = self.raw.get(section, {}) if section else self.raw
        v = src.get(key)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def multiplier(self) -> int:
        return int(self.raw["multiplier"])

    def sampling_space(self, label: str | None) -> TargetSamplingSpace:
        spaces = dict(PRESET_SPACES)
        spaces.update({k: TargetSamplingSpace.from_dict(v) for k, v in self.raw["sampling_spaces"].items()})
        if label in spaces:
            return spaces[label]
        fallback = self.raw.get("default_space")
        if fallback in spaces:
            return spaces[fallback]
        raise ConfigError(f"no sampling space for action class {label!r}")

    def controller_kwargs(self) -> dict:
        c = self.raw["controller"]
        keys = ("inertia", "kp", "kd", "torque_limit", "root_mass", "root_kp", "root_kd",
                "residual_force_limit", "ground_height")
        kw = {k: c[k] for k in keys}
        kw["gravity"] = tuple(c["gravity"])
        return kw

    def reward_weights(self) -> RewardWeights:
        return RewardWeights(**self.raw["controller"]["reward"])

    def thresholds(self) -> PlausibilityThresholds:
        v = dict(self.raw["validation"])
        if "foot_joints" in v:
            v["foot_joints"] = tuple(v["foot_joints"])
        return PlausibilityThresholds(**v)

    def __getitem__(self, key):
        return self.raw[key]


def build_config(doc: dict, base_dir: Path, seed_override: int | None = None,
                 out_override: str | None = None) -> PipelineConfig:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    raw = _merge(DEFAULTS, doc)
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_override is not None:
        raw["output_dir"] = str(Path(out_override).resolve())
    if "seed" not in raw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    for name in ("radial_range", "height_range", "angle_range"):
        for label, sp in raw["sampling_spaces"].items():
            if sp[name][0] > sp[name][1]:
                raise ConfigError(f"sampling space {label!r}: {name} lower bound exceeds upper bound")
    try:
        RewardWeights(**raw["controller"]["reward"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"controller.reward: {e}") from None
    cfg = PipelineConfig(raw, base_dir)
    corpus = cfg.path("corpus")
    if corpus is not None and not corpus.exists():
        raise ConfigError(f"corpus manifest not found: {corpus}")
    for key in ("embeddings", "decoder"):
        p = cfg.path(key, "latent")
        if p is not None and not p.exists():
            raise ConfigError(f"latent.{key} not found: {p}")
    return cfg


def load_config(path=None, seed_override: int | None = None, out_override: str | None = None) -> PipelineConfig:
    if path is None:
        return build_config({}, Path.cwd(), seed_override, out_override)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return build_config(doc, path.resolve().parent, seed_override, out_override)
