"""Synthetic scenes: seeded person layouts with known pose and attributes.

Scenes are the benchmark substrate.  Each person is a jittered copy of a
canonical upright skeleton plus a full attribute assignment.  Generators
are deterministic functions of their seed, so the whole benchmark can be
regenerated byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .grammar import (
    ATOMIC_PARTS,
    FULL_BODY,
    LOWER_BODY,
    PART_MEMBERS,
    UPPER_BODY,
    AttrId,
    AttributeDef,
    NodeId,
    default_attributes,
)

# Canonical joint offsets (pixels) relative to the torso center, y down.
CANONICAL_POSE: dict[NodeId, tuple[float, float]] = {
    "head": (0.0, -35.0),
    "torso": (0.0, 0.0),
    "l_shoulder": (-16.0, -22.0),
    "r_shoulder": (16.0, -22.0),
    "l_upper_arm": (-20.0, -6.0),
    "r_upper_arm": (20.0, -6.0),
    "l_lower_arm": (-22.0, 12.0),
    "r_lower_arm": (22.0, 12.0),
    "l_hip": (-10.0, 22.0),
    "r_hip": (10.0, 22.0),
    "l_upper_leg": (-11.0, 42.0),
    "r_upper_leg": (11.0, 42.0),
    "l_lower_leg": (-12.0, 62.0),
    "r_lower_leg": (12.0, 62.0),
}

# Approximate box extents per atomic part, at scale 1.
PART_BOX_SIZES: dict[NodeId, tuple[float, float]] = {
    "head": (24.0, 24.0),
    "torso": (34.0, 46.0),
    "l_shoulder": (18.0, 18.0),
    "r_shoulder": (18.0, 18.0),
    "l_upper_arm": (18.0, 26.0),
    "r_upper_arm": (18.0, 26.0),
    "l_lower_arm": (16.0, 24.0),
    "r_lower_arm": (16.0, 24.0),
    "l_hip": (18.0, 18.0),
    "r_hip": (18.0, 18.0),
    "l_upper_leg": (18.0, 30.0),
    "r_upper_leg": (18.0, 30.0),
    "l_lower_leg": (18.0, 30.0),
    "r_lower_leg": (18.0, 30.0),
}


@dataclass(frozen=True)
class Person:
    """Ground truth for one person: 14 joints plus attribute values."""

    joints: Mapping[NodeId, tuple[float, float]]
    attributes: Mapping[AttrId, str]

    def __post_init__(self) -> None:
        joints = {p: (float(x), float(y)) for p, (x, y) in self.joints.items()}
        missing = [p for p in ATOMIC_PARTS if p not in joints]
        if missing:
            raise ValidationError(f"person misses joints {missing}")
        extra = sorted(set(joints) - set(ATOMIC_PARTS))
        if extra:
            raise ValidationError(f"person has unknown joints {extra}")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "attributes", dict(self.attributes))


@dataclass(frozen=True)
class SyntheticScene:
    """A set of persons on a blank canvas of the given size."""

    persons: tuple[Person, ...]
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "persons", tuple(self.persons))
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))
        if not self.persons:
            raise ValidationError("scene needs at least one person")
        if w <= 0 or h <= 0:
            raise ValidationError(f"image size must be positive, got {(w, h)}")
        for i, person in enumerate(self.persons):
            for part, (x, y) in person.joints.items():
                if not (0.0 <= x <= w and 0.0 <= y <= h):
                    raise ValidationError(
                        f"person {i} joint {part!r} at ({x}, {y}) outside image {(w, h)}"
                    )

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "image_size": list(self.image_size),
            "persons": [
                {
                    "joints": {p: [x, y] for p, (x, y) in person.joints.items()},
                    "attributes": dict(person.attributes),
                }
                for person in self.persons
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "SyntheticScene":
        try:
            persons = tuple(
                Person(
                    joints={str(p): (float(v[0]), float(v[1])) for p, v in entry["joints"].items()},
                    attributes={str(a): str(v) for a, v in entry.get("attributes", {}).items()},
                )
                for entry in doc["persons"]
            )
            w, h = doc["image_size"]
            return cls(persons=persons, image_size=(int(w), int(h)))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed scene document: {exc}") from exc


def save_scene(scene: SyntheticScene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_scene(path: str) -> SyntheticScene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scene file {path}: invalid JSON: {exc}") from exc
    return SyntheticScene.from_json_dict(doc)


def person_keypoints(person: Person) -> dict[NodeId, tuple[float, float]]:
    """Keypoints for all 17 parts: joints plus member centroids."""
    pts = dict(person.joints)
    for part in (UPPER_BODY, LOWER_BODY, FULL_BODY):
        members = PART_MEMBERS[part]
        xs = [person.joints[m][0] for m in members]
        ys = [person.joints[m][1] for m in members]
        pts[part] = (sum(xs) / len(xs), sum(ys) / len(ys))
    return pts


def person_bbox(person: Person, pad: float = 8.0) -> tuple[float, float, float, float]:
    """Axis-aligned joint bounding box with padding, as (x0, y0, w, h)."""
    xs = [x for x, _ in person.joints.values()]
    ys = [y for _, y in person.joints.values()]
    x0, y0 = min(xs) - pad, min(ys) - pad
    return (x0, y0, max(xs) + pad - x0, max(ys) + pad - y0)


def _sample_attributes(rng: np.random.Generator, attr_defs: Sequence[AttributeDef]) -> dict[AttrId, str]:
    return {a.id: a.domain[int(rng.integers(0, len(a.domain)))] for a in attr_defs}


def _sample_person(
    rng: np.random.Generator,
    center: tuple[float, float],
    attributes: Mapping[AttrId, str],
    image_size: tuple[int, int],
    pose_sigma: float,
    scale: float,
) -> Person:
    w, h = image_size
    joints = {}
    for part, (ox, oy) in CANONICAL_POSE.items():
        x = center[0] + scale * ox + float(rng.normal(0.0, pose_sigma))
        y = center[1] + scale * oy + float(rng.normal(0.0, pose_sigma))
        joints[part] = (min(max(x, 0.0), float(w)), min(max(y, 0.0), float(h)))
    return Person(joints=joints, attributes=dict(attributes))


def single_person_scene(
    seed: int,
    *,
    image_size: tuple[int, int] = (320, 240),
    pose_sigma: float = 6.0,
    scale: float = 1.0,
    attr_defs: Sequence[AttributeDef] | None = None,
) -> SyntheticScene:
    """One person near the canvas center, pose and attributes seeded."""
    attr_defs = default_attributes() if attr_defs is None else tuple(attr_defs)
    rng = np.random.default_rng(int(seed))
    w, h = image_size
    center = (
        w * 0.5 + float(rng.normal(0.0, w * 0.05)),
        h * 0.5 + float(rng.normal(0.0, h * 0.04)),
    )
    attrs = _sample_attributes(rng, attr_defs)
    person = _sample_person(rng, center, attrs, image_size, pose_sigma, scale)
    return SyntheticScene(persons=(person,), image_size=image_size)


def two_person_scene(
    seed: int,
    *,
    image_size: tuple[int, int] = (320, 240),
    spacing: float = 24.0,
    pose_sigma: float = 6.0,
    scale: float = 1.0,
    attr_defs: Sequence[AttributeDef] | None = None,
    force_attribute_difference: bool = True,
) -> SyntheticScene:
    """Target person plus a close distractor standing beside them.

    The first person is the target.  The distractor stands ``spacing``
    pixels to the side, close enough that its limbs are geometrically
    plausible continuations of the target's, which is what makes joint
    pose-and-attribute reasoning pay off over pose alone.
    """
    attr_defs = default_attributes() if attr_defs is None else tuple(attr_defs)
    rng = np.random.default_rng(int(seed))
    w, h = image_size
    center = (
        w * 0.42 + float(rng.normal(0.0, w * 0.03)),
        h * 0.5 + float(rng.normal(0.0, h * 0.03)),
    )
    side = 1.0 if rng.random() < 0.5 else -1.0
    other = (
        center[0] + side * spacing,
        center[1] + float(rng.normal(0.0, 4.0)),
    )
    attrs_a = _sample_attributes(rng, attr_defs)
    attrs_b = _sample_attributes(rng, attr_defs)
    if force_attribute_difference and attrs_a == attrs_b:
        first = attr_defs[0]
        alternatives = [v for v in first.domain if v != attrs_a[first.id]]
        attrs_b = dict(attrs_b)
        attrs_b[first.id] = alternatives[0]
    person_a = _sample_person(rng, center, attrs_a, image_size, pose_sigma, scale)
    person_b = _sample_person(rng, other, attrs_b, image_size, pose_sigma, scale)
    return SyntheticScene(persons=(person_a, person_b), image_size=image_size)


def generate_family(
    family: str,
    n: int,
    seed: int,
    **kwargs,
) -> list[SyntheticScene]:
    """Generate ``n`` scenes of the named family under one master seed."""
    makers = {"single": single_person_scene, "two-person": two_person_scene}
    try:
        maker = makers[family]
    except KeyError:
        raise ValidationError(
            f"unknown scene family {family!r}, expected one of {sorted(makers)}"
        ) from None
    if n < 1:
        raise ValidationError(f"scene count must be >= 1, got {n}")
    return [maker(_child_seed(seed, i), **kwargs) for i in range(n)]


def _child_seed(seed: int, index: int) -> int:
    """Derived per-item seed: stable arithmetic, no RNG state shared."""
    return int(seed) * 1_000_003 + index
