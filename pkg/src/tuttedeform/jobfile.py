"""Job descriptions: a single JSON file drives every CLI workflow.

The file is validated against a JSON Schema with ``additionalProperties:
false`` throughout, so misspelled or unknown keys are rejected with the
offending path instead of being silently ignored.  Regions and rigid
motions are written in the coordinate system of the input geometry file;
they are mapped into the net's normalized domain internally.

Workflows:

* ``elastic``  handles + volumetric elastic energy (needs ``input.geometry``,
  ``constraints``, ``output.checkpoint``);
* ``fit``      known correspondences source -> target (needs
  ``input.geometry``, ``input.target_geometry``, ``output.checkpoint``);
* ``apply``    map geometry forward through a checkpoint;
* ``invert``   map geometry through the exact inverse;
* ``check``    re-verify invariants of a checkpoint;
* ``report``   write distortion / diagnostic statistics as CSV.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from jsonschema import Draft202012Validator

from .energy import LossWeights
from .errors import DeformError
from .optim import LearningRate, NetSpec
from .prism import frame_from_axis_angle


class ConfigError(DeformError):
    """Invalid job file, unresolvable path, or inconsistent configuration."""


_VEC3 = {"type": "array", "items": {"type": "number"},
         "minItems": 3, "maxItems": 3}

_REGION = {
    "type": "object", "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["sphere", "box", "halfspace"]},
        "center": _VEC3, "radius": {"type": "number", "exclusiveMinimum": 0},
        "min": _VEC3, "max": _VEC3,
        "normal": _VEC3, "offset": {"type": "number"},
    },
}

_MOTION = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "axis": _VEC3,
        "angle_degrees": {"type": "number"},
        "pivot": _VEC3,
        "translation": _VEC3,
    },
}

_CONSTRAINT = {
    "type": "object", "additionalProperties": False,
    "required": ["region"],
    "properties": {
        "region": _REGION,
        "motion": _MOTION,
        "static": {"type": "boolean"},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object", "additionalProperties": False,
    "required": ["workflow"],
    "properties": {
        "workflow": {"enum": ["elastic", "fit", "apply", "invert",
                              "check", "report"]},
        "seed": {"type": "integer", "minimum": 0},
        "net": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "layers": {"type": "integer", "minimum": 1},
                "resolution": {"type": "integer", "minimum": 2},
                "frames": {"enum": ["triplane"]},
            },
        },
        "optimizer": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "learning_rate": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "initial": {"type": "number", "exclusiveMinimum": 0},
                        "final": {"type": "number", "exclusiveMinimum": 0},
                        "decay_steps": {"type": "integer", "minimum": 0},
                    },
                },
                "max_steps": {"type": "integer", "minimum": 0},
                "stop_rel_tol": {"type": "number", "minimum": 0},
                "stop_window": {"type": "integer", "minimum": 1},
                "log_every": {"type": "integer", "minimum": 1},
            },
        },
        "loss": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "handle": {"type": "number", "minimum": 0},
                "regularization": {"type": "number", "minimum": 0},
                "elastic": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "initial": {"type": "number", "minimum": 0},
                        "decrement": {"type": "number", "minimum": 0},
                        "interval": {"type": "integer", "minimum": 0},
                        "floor": {"type": "number", "minimum": 0},
                    },
                },
                "gradient_weight": {"type": "number", "minimum": 0},
            },
        },
        "samples": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "moving": {"type": "integer", "minimum": 1},
                "static": {"type": "integer", "minimum": 1},
                "free": {"type": "integer", "minimum": 1},
                "grid_threshold": {"type": "number"},
            },
        },
        "constraints": {"type": "array", "items": _CONSTRAINT, "minItems": 1},
        "input": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "geometry": {"type": "string"},
                "target_geometry": {"type": "string"},
                "checkpoint": {"type": "string"},
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "checkpoint": {"type": "string"},
                "geometry": {"type": "string"},
                "report": {"type": "string"},
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(SCHEMA)

# default sample budgets: moving handle, static handle, free space
DEFAULT_BUDGETS = {"moving": 10000, "static": 15000, "free": 10000}


@dataclass(frozen=True)
class Region:
    kind: str
    center: np.ndarray = None
    radius: float = 0.0
    lo: np.ndarray = None
    hi: np.ndarray = None
    normal: np.ndarray = None
    offset: float = 0.0

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return np.sum((p - self.center) ** 2, axis=1) <= self.radius ** 2
        if self.kind == "box":
            return np.all((p >= self.lo) & (p <= self.hi), axis=1)
        return p @ self.normal >= self.offset


def _parse_region(d, path) -> Region:
    kind = d["kind"]
    if kind == "sphere":
        if "center" not in d or "radius" not in d:
            raise ConfigError(f"{path}: sphere region needs center and radius")
        return Region(kind, center=np.asarray(d["center"], dtype=np.float64),
                      radius=float(d["radius"]))
    if kind == "box":
        if "min" not in d or "max" not in d:
            raise ConfigError(f"{path}: box region needs min and max")
        lo = np.asarray(d["min"], dtype=np.float64)
        hi = np.asarray(d["max"], dtype=np.float64)
        if np.any(lo >= hi):
            raise ConfigError(f"{path}: box min must be strictly below max")
        return Region(kind, lo=lo, hi=hi)
    if "normal" not in d or "offset" not in d:
        raise ConfigError(f"{path}: halfspace region needs normal and offset")
    n = np.asarray(d["normal"], dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ConfigError(f"{path}: halfspace normal must be nonzero")
    return Region(kind, normal=n / norm, offset=float(d["offset"]) / norm)


@dataclass(frozen=True)
class Motion:
    """Rigid motion ``p -> R (p - pivot) + pivot + translation`` in the raw
    coordinates of the input file."""

    rotation: np.ndarray
    translation: np.ndarray  # full affine offset, pivot already folded in

    def in_normalized(self, transform):
        """Conjugate by ``q = (p - center) * scale``; rotation is unchanged."""
        R, c, s = self.rotation, transform.center, transform.scale
        t = s * (R @ c + self.translation - c)
        return R, t


def _parse_motion(d, path) -> Motion:
    axis = np.asarray(d.get("axis", [0.0, 0.0, 1.0]), dtype=np.float64)
    angle = float(d.get("angle_degrees", 0.0)) * np.pi / 180.0
    pivot = np.asarray(d.get("pivot", [0.0, 0.0, 0.0]), dtype=np.float64)
    tr = np.asarray(d.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64)
    if angle != 0.0 and np.linalg.norm(axis) == 0:
        raise ConfigError(f"{path}: rotation axis must be nonzero")
    R = frame_from_axis_angle(axis, angle).rotation if angle != 0.0 else np.eye(3)
    return Motion(rotation=R, translation=R @ (-pivot) + pivot + tr)


@dataclass(frozen=True)
class ConstraintSpec:
    region: Region
    motion: Optional[Motion]  # None marks a static handle

    @property
    def is_static(self):
        return self.motion is None


@dataclass
class JobFile:
    workflow: str
    seed: int
    net: NetSpec
    lr: LearningRate
    max_steps: int
    stop_rel_tol: float
    stop_window: int
    log_every: int
    weights: LossWeights
    gradient_weight: float
    budgets: dict
    grid_threshold: float
    constraints: Sequence[ConstraintSpec]
    inputs: dict    # resolved absolute paths
    outputs: dict   # resolved absolute paths
    raw: dict = field(repr=False, default=None)


_NEEDS = {
    "elastic": (["geometry"], ["checkpoint"]),
    "fit": (["geometry", "target_geometry"], ["checkpoint"]),
    "apply": (["geometry", "checkpoint"], ["geometry"]),
    "invert": (["geometry", "checkpoint"], ["geometry"]),
    "check": (["checkpoint"], []),
    "report": (["checkpoint"], ["report"]),
}

# workflow-specific optimizer defaults: (lr_initial, lr_final, decay, steps)
_OPT_DEFAULTS = {
    "elastic": (0.02, 0.0002, 4000, 4000),
    "fit": (0.02, 0.002, 5000, 5000),
}


def load_jobfile(path) -> JobFile:
    """Parse, schema-validate, and resolve a job file.

    Raises ConfigError with a JSON path for any schema violation (including
    unknown keys) and for missing inputs the workflow requires.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read job file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e

    errors = sorted(_VALIDATOR.iter_errors(raw), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(f"{first.json_path}: {first.message}")

    workflow = raw["workflow"]
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    inputs = {k: resolve(v) for k, v in raw.get("input", {}).items()}
    outputs = {k: resolve(v) for k, v in raw.get("output", {}).items()}
    need_in, need_out = _NEEDS[workflow]
    for key in need_in:
        if key not in inputs:
            raise ConfigError(f"workflow {workflow!r} requires input.{key}")
        if not os.path.isfile(inputs[key]):
            raise ConfigError(f"input.{key}: no such file: {inputs[key]}")
    for key in need_out:
        if key not in outputs:
            raise ConfigError(f"workflow {workflow!r} requires output.{key}")

    net_d = raw.get("net", {})
    default_res = 11 if workflow == "fit" else 25
    net = NetSpec(layers=net_d.get("layers", 24),
                  resolution=net_d.get("resolution", default_res))

    li, lf, ld, ms = _OPT_DEFAULTS.get(workflow, _OPT_DEFAULTS["elastic"])
    opt = raw.get("optimizer", {})
    lr_d = opt.get("learning_rate", {})
    lr = LearningRate(initial=lr_d.get("initial", li),
                      final=lr_d.get("final", lf),
                      decay_steps=lr_d.get("decay_steps", ld))

    loss_d = raw.get("loss", {})
    el = loss_d.get("elastic", {})
    weights = LossWeights(
        handle=loss_d.get("handle", 1.0),
        reg=loss_d.get("regularization", 0.005),
        elastic=el.get("initial", 0.004),
        elastic_decrement=el.get("decrement", 0.001),
        elastic_interval=el.get("interval", 600),
        elastic_floor=el.get("floor", 0.001),
    )

    samples_d = raw.get("samples", {})
    budgets = {k: samples_d.get(k, v) for k, v in DEFAULT_BUDGETS.items()}

    constraints = []
    for i, c in enumerate(raw.get("constraints", [])):
        p = f"$.constraints[{i}]"
        if c.get("static", False) and "motion" in c:
            raise ConfigError(f"{p}: a constraint cannot be both static and moving")
        region = _parse_region(c["region"], p + ".region")
        motion = None if "motion" not in c else _parse_motion(c["motion"], p + ".motion")
        constraints.append(ConstraintSpec(region=region, motion=motion))
    if workflow == "elastic" and not constraints:
        raise ConfigError("workflow 'elastic' requires at least one constraint")

    return JobFile(
        workflow=workflow,
        seed=raw.get("seed", 0),
        net=net,
        lr=lr,
        max_steps=opt.get("max_steps", ms),
        stop_rel_tol=opt.get("stop_rel_tol", 0.0),
        stop_window=opt.get("stop_window", 100),
        log_every=opt.get("log_every", 50),
        weights=weights,
        gradient_weight=loss_d.get("gradient_weight", 0.1),
        budgets=budgets,
        grid_threshold=samples_d.get("grid_threshold", 1.0),
        constraints=constraints,
        inputs=inputs,
        outputs=outputs,
        raw=raw,
    )
