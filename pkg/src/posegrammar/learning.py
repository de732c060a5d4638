"""Model learning from pose annotations.

Covers the ingestion and fitting side of the engine: labeling detector
proposals against annotated persons, fitting the part-type co-occurrence
tables and the per-edge displacement mixtures, and deriving part to
attribute associations from mutual information between attribute
availability and part visibility.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .appearance import Proposal
from .errors import DegenerateDataError, MissingEntryError, ValidationError
from .grammar import (
    ATOMIC_PARTS,
    PART_MEMBERS,
    AOGrammar,
    AttrId,
    NodeId,
)
from .relations import (
    COV_EIG_FLOOR,
    AttributeAssociation,
    Edge,
    KinematicMoG,
    Mixture,
    SyntacticTable,
)

# Proposal labeling thresholds: person-box overlap below the first bound
# marks a negative, above the second bound a part candidate; the band in
# between is discarded as ambiguous.  Part candidates must additionally
# have a normalized keypoint distance below the distance bound.
OVERLAP_NEGATIVE = 0.5
OVERLAP_POSITIVE = 0.7
DISTANCE_BOUND = 0.5


@dataclass(frozen=True)
class JointObs:
    """One annotated joint: position plus visibility."""

    x: float
    y: float
    visible: bool = True


@dataclass(frozen=True)
class Annotation:
    """Ground truth for one person: 14 joints, person box, attribute values.

    ``attributes`` maps attribute ids to a value label, or ``None`` when
    the value could not be determined for this person (for example the
    relevant body region is not visible).
    """

    joints: Mapping[NodeId, JointObs]
    person_box: tuple[float, float, float, float]
    attributes: Mapping[AttrId, str | None]

    def __post_init__(self) -> None:
        joints = dict(self.joints)
        missing = [p for p in ATOMIC_PARTS if p not in joints]
        if missing:
            raise ValidationError(f"annotation misses joints {missing}")
        extra = sorted(set(joints) - set(ATOMIC_PARTS))
        if extra:
            raise ValidationError(f"annotation has unknown joints {extra}")
        if not any(j.visible for j in joints.values()):
            raise ValidationError("annotation needs at least one visible joint")
        box = tuple(float(v) for v in self.person_box)
        if len(box) != 4 or box[2] <= 0.0 or box[3] <= 0.0:
            raise ValidationError(f"person box must have positive area, got {box!r}")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "person_box", box)
        object.__setattr__(self, "attributes", dict(self.attributes))

    def to_json_dict(self) -> dict:
        return {
            "joints": {p: [j.x, j.y, bool(j.visible)] for p, j in self.joints.items()},
            "person_box": list(self.person_box),
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "Annotation":
        try:
            joints = {
                str(p): JointObs(x=float(v[0]), y=float(v[1]), visible=bool(v[2]))
                for p, v in doc["joints"].items()
            }
            attributes = {
                str(a): (None if v is None else str(v))
                for a, v in doc.get("attributes", {}).items()
            }
            return cls(
                joints=joints,
                person_box=tuple(float(v) for v in doc["person_box"]),
                attributes=attributes,
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed annotation: {exc}") from exc


def save_annotations(annotations: Sequence[Annotation], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json_dict(), sort_keys=True) + "\n")


def load_annotations(path: str) -> list[Annotation]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Annotation.from_json_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class LabeledProposal:
    """A proposal after labeling: a part candidate or a negative.

    ``part`` is ``None`` for negatives.  ``distance`` records the
    normalized keypoint distance for proposals that passed the overlap
    bound, ``None`` otherwise.
    """

    proposal: Proposal
    part: NodeId | None
    part_type: int | None
    distance: float | None

    @property
    def is_negative(self) -> bool:
        return self.part is None


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x0, y0, w, h) boxes."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0.0 else 0.0


def annotation_keypoints(ann: Annotation) -> dict[NodeId, tuple[float, float]]:
    """Keypoints for all 17 parts: joints plus member centroids."""
    pts = {p: (j.x, j.y) for p, j in ann.joints.items()}
    for part, members in PART_MEMBERS.items():
        xs = [ann.joints[m].x for m in members]
        ys = [ann.joints[m].y for m in members]
        pts[part] = (sum(xs) / len(xs), sum(ys) / len(ys))
    return pts


def _box_contains_all(box: Sequence[float], points: Iterable[tuple[float, float]]) -> bool:
    x0, y0, w, h = box
    return all(x0 <= x <= x0 + w and y0 <= y <= y0 + h for x, y in points)


def label_proposals(ann: Annotation, proposals: Sequence[Proposal]) -> list[LabeledProposal]:
    """Label proposals against one annotated person.

    Proposals whose person-box overlap falls below ``OVERLAP_NEGATIVE``
    become negatives.  Proposals above ``OVERLAP_POSITIVE`` are matched to
    the part whose keypoint is nearest under the normalized squared
    distance; a nearest composite part only sticks if the proposal box
    contains all of its joints, otherwise the nearest atomic part is used.
    Matches with distance at or above ``DISTANCE_BOUND`` are dropped, as
    is the ambiguous overlap band in between.
    """
    keypoints = annotation_keypoints(ann)
    out: list[LabeledProposal] = []
    for prop in proposals:
        overlap = box_iou(prop.box, ann.person_box)
        if overlap < OVERLAP_NEGATIVE:
            out.append(LabeledProposal(prop, part=None, part_type=None, distance=None))
            continue
        if overlap <= OVERLAP_POSITIVE:
            continue
        cx, cy = prop.x, prop.y
        norm = min(prop.box[2], prop.box[3])
        best_part = None
        best_d = math.inf
        for part, (kx, ky) in keypoints.items():
            d = ((cx - kx) ** 2 + (cy - ky) ** 2) / norm
            if d < best_d:
                best_d = d
                best_part = part
        if best_part not in ATOMIC_PARTS:
            members = PART_MEMBERS[best_part]
            if not _box_contains_all(prop.box, [keypoints[m] for m in members]):
                best_part = min(
                    ATOMIC_PARTS,
                    key=lambda p: (cx - keypoints[p][0]) ** 2 + (cy - keypoints[p][1]) ** 2,
                )
        if best_d < DISTANCE_BOUND:
            out.append(
                LabeledProposal(prop, part=best_part, part_type=prop.part_type, distance=best_d)
            )
    return out


def fit_syntactic(
    data: Sequence[tuple[Annotation, Mapping[NodeId, int]]],
    grammar: AOGrammar,
    *,
    alpha: float = 1.0,
) -> SyntacticTable:
    """Fit per-edge part-type co-occurrence tables with add-alpha smoothing.

    ``data`` pairs each annotation with the part types chosen for it (for
    example the types of its matched positive proposals).  An edge
    contributes a sample when both of its parts have a type.  Edges with
    no samples fall back to the uniform table with a warning.
    """
    t = grammar.part_type_count
    cells = t * t
    tables: dict[Edge, np.ndarray] = {}
    for edge in grammar.psg_edges:
        parent, child = edge
        counts = np.zeros((t, t), dtype=float)
        n = 0
        for _ann, types in data:
            tp = types.get(parent)
            tc = types.get(child)
            if tp is None or tc is None:
                continue
            if not (1 <= tp <= t and 1 <= tc <= t):
                raise ValidationError(
                    f"part types for edge {edge} must lie in 1..{t}, got ({tp}, {tc})"
                )
            counts[tp - 1, tc - 1] += 1.0
            n += 1
        if n == 0:
            warnings.warn(
                f"no part-type samples for edge {edge}; using the uniform table",
                stacklevel=2,
            )
        tables[edge] = (counts + alpha) / (n + alpha * cells)
    return SyntacticTable(tables, part_type_count=t)


def _kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seed ``k`` means by the usual distance-weighted sampling."""
    n = X.shape[0]
    means = np.empty((k, X.shape[1]))
    means[0] = X[int(rng.integers(0, n))]
    d2 = np.sum((X - means[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            means[i] = X[int(rng.integers(0, n))]
            continue
        means[i] = X[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((X - means[i]) ** 2, axis=1))
    return means


def _floor_covariance(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and lift eigenvalues to the covariance floor."""
    cov = (cov + cov.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, COV_EIG_FLOOR)
    return (eigvecs * eigvals) @ eigvecs.T


def _mixture_log_density(X: np.ndarray, weights, means, covs) -> np.ndarray:
    from scipy.special import logsumexp

    n, k = X.shape[0], weights.shape[0]
    comps = np.full((n, k), -np.inf)
    for i in range(k):
        if weights[i] <= 0.0:
            continue
        diff = X - means[i]
        inv = np.linalg.inv(covs[i])
        _, logdet = np.linalg.slogdet(covs[i])
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        comps[:, i] = math.log(weights[i]) - math.log(2.0 * math.pi) - 0.5 * logdet - 0.5 * quad
    return logsumexp(comps, axis=1)


def _em_fit(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iter: int,
    tol: float,
) -> tuple[Mixture, list[float]]:
    from scipy.special import logsumexp

    n = X.shape[0]
    means = _kmeans_plusplus(X, k, rng)
    labels = np.argmin(
        np.sum((X[:, None, :] - means[None, :, :]) ** 2, axis=2), axis=1
    )
    weights = np.full(k, 1.0 / k)
    covs = np.empty((k, 2, 2))
    global_cov = _floor_covariance(np.cov(X.T) if n > 1 else np.eye(2))
    for i in range(k):
        members = X[labels == i]
        if members.shape[0] >= 2:
            covs[i] = _floor_covariance(np.cov(members.T))
            weights[i] = members.shape[0] / n
        else:
            covs[i] = global_cov
            weights[i] = max(members.shape[0], 1) / n
    weights = weights / weights.sum()

    trace: list[float] = []
    prev = None
    for _ in range(max_iter):
        # E-step quantities double as the likelihood trace.
        log_comp = np.full((n, k), -np.inf)
        for i in range(k):
            if weights[i] <= 0.0:
                continue
            diff = X - means[i]
            inv = np.linalg.inv(covs[i])
            _, logdet = np.linalg.slogdet(covs[i])
            quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
            log_comp[:, i] = (
                math.log(weights[i]) - math.log(2.0 * math.pi) - 0.5 * logdet - 0.5 * quad
            )
        log_mix = logsumexp(log_comp, axis=1)
        ll = float(np.mean(log_mix))
        if prev is not None and ll < prev - 1e-7:
            raise RuntimeError(
                f"EM mean log-likelihood decreased from {prev} to {ll}"
            )
        trace.append(ll)
        if prev is not None and ll - prev < tol:
            break
        prev = ll

        resp = np.exp(log_comp - log_mix[:, None])
        nk = resp.sum(axis=0)
        for i in range(k):
            if nk[i] < 1e-12:
                # Empty component: keep its parameters, zero its weight.
                weights[i] = 0.0
                continue
            weights[i] = nk[i] / n
            means[i] = resp[:, i] @ X / nk[i]
            diff = X - means[i]
            covs[i] = _floor_covariance((resp[:, i] * diff.T) @ diff / nk[i])
        weights = weights / weights.sum()
    else:
        log_mix = _mixture_log_density(X, weights, means, covs)
        trace.append(float(np.mean(log_mix)))

    return Mixture(weights=weights, means=means, covariances=covs), trace


def fit_kinematic(
    data: Mapping[Edge, np.ndarray],
    n_components: int = 10,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> KinematicMoG:
    """Fit one displacement mixture per dependency edge via EM.

    Each edge needs at least two displacement samples.  When an edge has
    fewer samples than requested components, the component count drops to
    the sample count with a warning.  Per-edge fits are seeded
    independently from ``seed`` so edge order cannot leak between fits.
    """
    mixtures: dict[Edge, Mixture] = {}
    traces: dict[Edge, list[float]] = {}
    for index, (edge, samples) in enumerate(data.items()):
        X = np.asarray(samples, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValidationError(
                f"edge {edge}: displacement samples must be (n, 2), got {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise ValidationError(f"edge {edge}: displacement samples must be finite")
        n = X.shape[0]
        if n < 2:
            raise DegenerateDataError(
                f"edge {edge}: needs at least 2 displacement samples, got {n}"
            )
        k = n_components
        if n < k:
            warnings.warn(
                f"edge {edge}: only {n} samples for {k} components; using {n}",
                stacklevel=2,
            )
            k = n
        rng = np.random.default_rng([int(seed), index])
        mixtures[edge], traces[edge] = _em_fit(X, k, rng, max_iter, tol)
    return KinematicMoG(mixtures, fit_traces=traces)


def displacement_samples(
    annotations: Sequence[Annotation], grammar: AOGrammar
) -> dict[Edge, np.ndarray]:
    """Child-minus-parent offsets per dependency edge, visible joints only."""
    out: dict[Edge, list[tuple[float, float]]] = {e: [] for e in grammar.dg_edges}
    for ann in annotations:
        for parent, child in grammar.dg_edges:
            jp, jc = ann.joints[parent], ann.joints[child]
            if jp.visible and jc.visible:
                out[(parent, child)].append((jc.x - jp.x, jc.y - jp.y))
    return {e: np.asarray(v, dtype=float) for e, v in out.items()}


def mutual_information(attr_known: Sequence[bool], part_visible: Sequence[bool]) -> float:
    """Mutual information, in nats, of two paired boolean samples."""
    if len(attr_known) != len(part_visible):
        raise ValidationError(
            f"sample lists differ in length: {len(attr_known)} vs {len(part_visible)}"
        )
    n = len(attr_known)
    if n == 0:
        raise ValidationError("mutual information needs at least one sample")
    counts = [[0, 0], [0, 0]]
    for a, b in zip(attr_known, part_visible):
        counts[int(bool(a))][int(bool(b))] += 1
    mi = 0.0
    for i in (0, 1):
        for j in (0, 1):
            c = counts[i][j]
            if c == 0:
                continue
            p = c / n
            px = (counts[i][0] + counts[i][1]) / n
            py = (counts[0][j] + counts[1][j]) / n
            mi += p * math.log(p / (px * py))
    return mi


def derive_associations(
    mi: Mapping[NodeId, Mapping[AttrId, float]],
    grammar: AOGrammar,
) -> AttributeAssociation:
    """Associate attributes with parts whose MI is strictly above the mean.

    The mean is taken over the atomic parts for each attribute.  Every
    associated part then propagates the attribute to its decomposition
    ancestors, so the result is closed under the part hierarchy.
    """
    atomic = grammar.terminal_ids
    attr_ids = tuple(a.id for a in grammar.attributes)
    for part in atomic:
        if part not in mi:
            raise MissingEntryError(f"mutual information map misses atomic part {part!r}")
        for attr in attr_ids:
            if attr not in mi[part]:
                raise MissingEntryError(
                    f"mutual information map misses attribute {attr!r} for part {part!r}"
                )
    parts: dict[NodeId, set[AttrId]] = {p: set() for p in grammar.part_ids}
    for attr in attr_ids:
        values = [float(mi[p][attr]) for p in atomic]
        mean = sum(values) / len(values)
        for part, value in zip(atomic, values):
            if value > mean:
                parts[part].add(attr)
                for ancestor in grammar.psg_ancestors(part):
                    parts[ancestor].add(attr)
    provenance = {p: {a: float(v) for a, v in per.items()} for p, per in mi.items()}
    return AttributeAssociation(parts=parts, attr_ids=attr_ids, mi=provenance)


def learn_models(
    annotations: Sequence[Annotation],
    grammar: AOGrammar,
    *,
    type_samples: Sequence[Mapping[NodeId, int]] | None = None,
    proposal_groups: Sequence[Sequence[Proposal]] | None = None,
    n_components: int = 10,
    seed: int = 0,
):
    """Fit all three relation models from an annotated corpus.

    Part types for the co-occurrence tables come from ``type_samples``
    when given, else from labeling ``proposal_groups`` against their
    annotations, else every edge falls back to uniform.
    """
    from .relations import RelationModels

    if not annotations:
        raise DegenerateDataError("learning needs at least one annotation")
    if type_samples is not None and len(type_samples) != len(annotations):
        raise ValidationError("type_samples must align one-to-one with annotations")
    if proposal_groups is not None and len(proposal_groups) != len(annotations):
        raise ValidationError("proposal_groups must align one-to-one with annotations")

    if type_samples is None:
        type_samples = []
        for i, ann in enumerate(annotations):
            types: dict[NodeId, int] = {}
            if proposal_groups is not None:
                for lp in label_proposals(ann, proposal_groups[i]):
                    if not lp.is_negative and lp.part not in types:
                        types[lp.part] = lp.part_type
            type_samples.append(types)

    syntactic = fit_syntactic(list(zip(annotations, type_samples)), grammar)
    kinematic = fit_kinematic(
        displacement_samples(annotations, grammar), n_components=n_components, seed=seed
    )

    mi: dict[NodeId, dict[AttrId, float]] = {}
    attr_ids = [a.id for a in grammar.attributes]
    for part in grammar.terminal_ids:
        visible = [ann.joints[part].visible for ann in annotations]
        mi[part] = {}
        for attr in attr_ids:
            known = [ann.attributes.get(attr) is not None for ann in annotations]
            mi[part][attr] = mutual_information(known, visible)
    association = derive_associations(mi, grammar)
    return RelationModels(
        syntactic=syntactic,
        kinematic=kinematic,
        association=association,
        part_type_count=grammar.part_type_count,
    )
