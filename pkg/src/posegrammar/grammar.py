"""Attributed and-or graph over human body parts.

This module holds the structural half of the grammar: the node hierarchy,
the two edge sets, the attribute catalog, and the parse-graph types that
inference produces.  The learned probability models live in
:mod:`posegrammar.relations`; appearance scores in
:mod:`posegrammar.appearance`.

A grammar carries two edge sets over the same nodes:

* ``psg_edges`` decompose a part into its constituents (parent -> child),
  e.g. the full body into upper and lower body.
* ``dg_edges`` connect geometrically dependent parts (parent -> child),
  e.g. the torso to the head.  In the default grammar they form a tree
  over the 14 atomic parts, rooted at the torso.

Part appearance variation (scale, aspect ratio) is folded into a per-part
``part_type`` in ``1..part_type_count`` rather than explicit or-branches,
so the default grammar contains only and-nodes and terminals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import MissingEntryError, ValidationError

NodeId = str
AttrId = str

SCHEMA_VERSION = 1

# Atomic (terminal) parts, in canonical order.
ATOMIC_PARTS: tuple[NodeId, ...] = (
    "head",
    "torso",
    "l_shoulder",
    "r_shoulder",
    "l_upper_arm",
    "l_lower_arm",
    "r_upper_arm",
    "r_lower_arm",
    "l_hip",
    "r_hip",
    "l_upper_leg",
    "l_lower_leg",
    "r_upper_leg",
    "r_lower_leg",
)

UPPER_BODY: NodeId = "upper_body"
LOWER_BODY: NodeId = "lower_body"
FULL_BODY: NodeId = "full_body"
MID_PARTS: tuple[NodeId, ...] = (UPPER_BODY, LOWER_BODY)

UPPER_BODY_MEMBERS: tuple[NodeId, ...] = (
    "head",
    "torso",
    "l_shoulder",
    "r_shoulder",
    "l_upper_arm",
    "l_lower_arm",
    "r_upper_arm",
    "r_lower_arm",
)
LOWER_BODY_MEMBERS: tuple[NodeId, ...] = (
    "l_hip",
    "r_hip",
    "l_upper_leg",
    "l_lower_leg",
    "r_upper_leg",
    "r_lower_leg",
)

# Atomic joints covered by each composite part.
PART_MEMBERS: dict[NodeId, tuple[NodeId, ...]] = {
    UPPER_BODY: UPPER_BODY_MEMBERS,
    LOWER_BODY: LOWER_BODY_MEMBERS,
    FULL_BODY: ATOMIC_PARTS,
}

# Geometric dependency tree over atomic parts, rooted at the torso.
# Order matters: stick indices in evaluation follow this listing.
DEFAULT_DG_EDGES: tuple[tuple[NodeId, NodeId], ...] = (
    ("torso", "head"),
    ("torso", "l_shoulder"),
    ("l_shoulder", "l_upper_arm"),
    ("l_upper_arm", "l_lower_arm"),
    ("torso", "r_shoulder"),
    ("r_shoulder", "r_upper_arm"),
    ("r_upper_arm", "r_lower_arm"),
    ("torso", "l_hip"),
    ("l_hip", "l_upper_leg"),
    ("l_upper_leg", "l_lower_leg"),
    ("torso", "r_hip"),
    ("r_hip", "r_upper_leg"),
    ("r_upper_leg", "r_lower_leg"),
)

DEFAULT_PART_TYPE_COUNT = 9


class NodeKind(str, Enum):
    AND = "and"
    OR = "or"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class GrammarNode:
    """One node of the and-or graph.

    Arity rules (terminals childless, or-nodes branching, and-nodes
    composing) are reported by :func:`validate` rather than enforced here,
    so that malformed documents can be loaded and diagnosed.
    """

    id: NodeId
    kind: NodeKind
    name: str
    children: tuple[NodeId, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("grammar node id must be non-empty")
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_terminal(self) -> bool:
        return self.kind is NodeKind.TERMINAL


@dataclass(frozen=True)
class AttributeDef:
    """A categorical attribute with a fixed value vocabulary."""

    id: AttrId
    name: str
    domain: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("attribute id must be non-empty")
        domain = tuple(self.domain)
        if len(domain) < 2:
            raise ValidationError(
                f"attribute {self.id!r}: domain needs at least two values, got {domain!r}"
            )
        if len(set(domain)) != len(domain):
            raise ValidationError(f"attribute {self.id!r}: duplicate domain values in {domain!r}")
        object.__setattr__(self, "domain", domain)


class AOGrammar:
    """Immutable structural grammar: nodes, both edge sets, attributes.

    Construction accepts structurally broken graphs so that
    :func:`validate` can report on them; inference and learning assume a
    grammar whose validation report is clean.
    """

    def __init__(
        self,
        root: NodeId,
        nodes: Sequence[GrammarNode],
        psg_edges: Iterable[tuple[NodeId, NodeId]],
        dg_edges: Iterable[tuple[NodeId, NodeId]],
        attributes: Sequence[AttributeDef] = (),
        part_type_count: int = DEFAULT_PART_TYPE_COUNT,
    ) -> None:
        self.root = root
        self.nodes = tuple(nodes)
        self.psg_edges = tuple((str(p), str(c)) for p, c in psg_edges)
        self.dg_edges = tuple((str(p), str(c)) for p, c in dg_edges)
        self.attributes = tuple(attributes)
        self.part_type_count = int(part_type_count)

        self._node_by_id = {n.id: n for n in self.nodes}
        self._attr_by_id = {a.id: a for a in self.attributes}
        self._psg_parents: dict[NodeId, list[NodeId]] = {}
        for parent, child in self.psg_edges:
            self._psg_parents.setdefault(child, []).append(parent)
        self._dg_parents: dict[NodeId, list[NodeId]] = {}
        self._dg_children: dict[NodeId, list[NodeId]] = {}
        for parent, child in self.dg_edges:
            self._dg_parents.setdefault(child, []).append(parent)
            self._dg_children.setdefault(parent, []).append(child)

    # -- lookups ---------------------------------------------------------

    @property
    def part_ids(self) -> tuple[NodeId, ...]:
        return tuple(n.id for n in self.nodes)

    @property
    def terminal_ids(self) -> tuple[NodeId, ...]:
        return tuple(n.id for n in self.nodes if n.is_terminal)

    def node(self, node_id: NodeId) -> GrammarNode:
        try:
            return self._node_by_id[node_id]
        except KeyError:
            raise MissingEntryError(f"unknown grammar node {node_id!r}") from None

    def has_node(self, node_id: NodeId) -> bool:
        return node_id in self._node_by_id

    def attribute(self, attr_id: AttrId) -> AttributeDef:
        try:
            return self._attr_by_id[attr_id]
        except KeyError:
            raise MissingEntryError(f"unknown attribute {attr_id!r}") from None

    def psg_parent(self, node_id: NodeId) -> NodeId | None:
        parents = self._psg_parents.get(node_id)
        return parents[0] if parents else None

    def dg_parent(self, node_id: NodeId) -> NodeId | None:
        parents = self._dg_parents.get(node_id)
        return parents[0] if parents else None

    def dg_children(self, node_id: NodeId) -> tuple[NodeId, ...]:
        return tuple(self._dg_children.get(node_id, ()))

    def psg_ancestors(self, node_id: NodeId) -> tuple[NodeId, ...]:
        """Chain of decomposition parents from ``node_id`` up to the root."""
        out: list[NodeId] = []
        seen = {node_id}
        cur = self.psg_parent(node_id)
        while cur is not None and cur not in seen:
            out.append(cur)
            seen.add(cur)
            cur = self.psg_parent(cur)
        return tuple(out)

    # -- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "root": self.root,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "name": n.name,
                    "children": list(n.children),
                }
                for n in self.nodes
            ],
            "psg_edges": [list(e) for e in self.psg_edges],
            "dg_edges": [list(e) for e in self.dg_edges],
            "attributes": [
                {"id": a.id, "name": a.name, "domain": list(a.domain)} for a in self.attributes
            ],
            "part_type_count": self.part_type_count,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "AOGrammar":
        try:
            nodes = [
                GrammarNode(
                    id=str(n["id"]),
                    kind=NodeKind(n["kind"]),
                    name=str(n.get("name", n["id"])),
                    children=tuple(str(c) for c in n.get("children", ())),
                )
                for n in doc["nodes"]
            ]
            attrs = [
                AttributeDef(
                    id=str(a["id"]),
                    name=str(a.get("name", a["id"])),
                    domain=tuple(str(v) for v in a["domain"]),
                )
                for a in doc.get("attributes", ())
            ]
            return cls(
                root=str(doc["root"]),
                nodes=nodes,
                psg_edges=[(str(p), str(c)) for p, c in doc.get("psg_edges", ())],
                dg_edges=[(str(p), str(c)) for p, c in doc.get("dg_edges", ())],
                attributes=attrs,
                part_type_count=int(doc.get("part_type_count", DEFAULT_PART_TYPE_COUNT)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed grammar document: {exc}") from exc

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AOGrammar):
            return NotImplemented
        return self.to_json_dict() == other.to_json_dict()

    def __repr__(self) -> str:
        return (
            f"AOGrammar(root={self.root!r}, nodes={len(self.nodes)}, "
            f"psg_edges={len(self.psg_edges)}, dg_edges={len(self.dg_edges)}, "
            f"attributes={len(self.attributes)})"
        )


def save_grammar(grammar: AOGrammar, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(grammar.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_grammar(path: str) -> AOGrammar:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"grammar file {path}: invalid JSON: {exc}") from exc
    return AOGrammar.from_json_dict(doc)


def default_attributes() -> tuple[AttributeDef, ...]:
    """Default catalog of person attributes used by the synthetic benchmark."""
    spec = [
        ("gender", ("male", "female")),
        ("age", ("youth", "adult", "elderly")),
        ("hair_style", ("long_hair", "short_hair", "bald")),
        ("upper_cloth_type", ("t_shirt", "jumper", "suit", "no_cloth", "swimwear")),
        ("upper_cloth_length", ("long_sleeve", "short_sleeve", "no_sleeve")),
        ("lower_cloth_type", ("long_pants", "short_pants", "skirt", "jeans")),
        ("glasses", ("yes", "no")),
        ("hat", ("yes", "no")),
        ("backpack", ("yes", "no")),
    ]
    return tuple(AttributeDef(id=a, name=a.replace("_", " "), domain=d) for a, d in spec)


def build_default_human_grammar(
    attr_defs: Sequence[AttributeDef] | None = None,
    part_type_count: int = DEFAULT_PART_TYPE_COUNT,
) -> AOGrammar:
    """Build the 17-part human body grammar.

    One root (full body), two mid-level parts (upper and lower body), and
    14 atomic parts.  16 decomposition edges, 13 dependency edges.
    """
    if attr_defs is None:
        attr_defs = default_attributes()
    seen: set[AttrId] = set()
    for a in attr_defs:
        if a.id in seen:
            raise ValidationError(f"duplicate attribute id {a.id!r}")
        seen.add(a.id)

    nodes = [
        GrammarNode(FULL_BODY, NodeKind.AND, "full body", (UPPER_BODY, LOWER_BODY)),
        GrammarNode(UPPER_BODY, NodeKind.AND, "upper body", UPPER_BODY_MEMBERS),
        GrammarNode(LOWER_BODY, NodeKind.AND, "lower body", LOWER_BODY_MEMBERS),
    ]
    nodes.extend(
        GrammarNode(p, NodeKind.TERMINAL, p.replace("_", " ")) for p in ATOMIC_PARTS
    )

    psg_edges = [(FULL_BODY, UPPER_BODY), (FULL_BODY, LOWER_BODY)]
    psg_edges.extend((UPPER_BODY, m) for m in UPPER_BODY_MEMBERS)
    psg_edges.extend((LOWER_BODY, m) for m in LOWER_BODY_MEMBERS)

    return AOGrammar(
        root=FULL_BODY,
        nodes=nodes,
        psg_edges=psg_edges,
        dg_edges=DEFAULT_DG_EDGES,
        attributes=tuple(attr_defs),
        part_type_count=part_type_count,
    )


# -- validation ------------------------------------------------------------


@dataclass
class ValidationReport:
    """Outcome of structural validation: empty ``violations`` means valid."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)

    def __bool__(self) -> bool:
        return self.ok


def _find_cycle(edges: Iterable[tuple[NodeId, NodeId]]) -> bool:
    adjacency: dict[NodeId, list[NodeId]] = {}
    for p, c in edges:
        adjacency.setdefault(p, []).append(c)
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[NodeId, int] = {}

    def visit(u: NodeId) -> bool:
        color[u] = GRAY
        for v in adjacency.get(u, ()):
            state = color.get(v, WHITE)
            if state == GRAY:
                return True
            if state == WHITE and visit(v):
                return True
        color[u] = BLACK
        return False

    return any(color.get(u, WHITE) == WHITE and visit(u) for u in list(adjacency))


def validate(grammar: AOGrammar) -> ValidationReport:
    """Check structural well-formedness; returns a report, never raises."""
    report = ValidationReport()
    ids = [n.id for n in grammar.nodes]
    known = set(ids)

    if len(known) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        report.add(f"duplicate node ids: {dupes}")
    if not grammar.nodes:
        report.add("grammar has no nodes")
    if grammar.root not in known:
        report.add(f"root {grammar.root!r} is not a declared node")
    if grammar.part_type_count < 1:
        report.add(f"part_type_count must be >= 1, got {grammar.part_type_count}")

    for n in grammar.nodes:
        n_children = len(n.children)
        if n.kind is NodeKind.TERMINAL and n_children:
            report.add(f"terminal node {n.id!r} has children {list(n.children)}")
        elif n.kind is NodeKind.OR and n_children < 2:
            report.add(f"or-node {n.id!r} needs at least two children, has {n_children}")
        elif n.kind is NodeKind.AND and n_children < 1:
            report.add(f"and-node {n.id!r} has no children")
        if len(set(n.children)) != n_children:
            report.add(f"node {n.id!r} lists duplicate children")
        for c in n.children:
            if c not in known:
                report.add(f"node {n.id!r} references undeclared child {c!r}")

    for label, edges in (("psg", grammar.psg_edges), ("dg", grammar.dg_edges)):
        for p, c in edges:
            if p == c:
                report.add(f"{label} self-edge on {p!r}")
            for end in (p, c):
                if end not in known:
                    report.add(f"{label} edge ({p!r}, {c!r}) references undeclared node {end!r}")
        if len(set(edges)) != len(edges):
            report.add(f"duplicate {label} edges")

    # Decomposition edges must mirror the children lists.
    psg_set = set(grammar.psg_edges)
    child_set = {(n.id, c) for n in grammar.nodes for c in n.children}
    for edge in sorted(psg_set - child_set):
        report.add(f"psg edge {edge} not present in any children list")
    for edge in sorted(child_set - psg_set):
        report.add(f"children list pair {edge} missing from psg_edges")

    if _find_cycle(grammar.psg_edges):
        report.add("psg edges contain a cycle")
    else:
        # With acyclic edges, check single-parenthood and root reachability.
        for child, parents in grammar._psg_parents.items():
            if len(parents) > 1:
                report.add(f"node {child!r} has multiple psg parents {sorted(parents)}")
        if grammar.root in known:
            reached = {grammar.root}
            frontier = [grammar.root]
            while frontier:
                cur = frontier.pop()
                if cur not in grammar._node_by_id:
                    continue
                for c in grammar.node(cur).children:
                    if c in known and c not in reached:
                        reached.add(c)
                        frontier.append(c)
            unreached = sorted(known - reached)
            if unreached:
                report.add(f"nodes unreachable from root via psg edges: {unreached}")

    terminals = set(grammar.terminal_ids)
    for p, c in grammar.dg_edges:
        for end in (p, c):
            if end in known and end not in terminals:
                report.add(f"dg edge ({p!r}, {c!r}) touches non-terminal node {end!r}")
    if _find_cycle(grammar.dg_edges):
        report.add("dg edges contain a cycle")
    else:
        for child, parents in grammar._dg_parents.items():
            if len(parents) > 1:
                report.add(f"node {child!r} has multiple dg parents {sorted(parents)}")

    attr_ids = [a.id for a in grammar.attributes]
    if len(set(attr_ids)) != len(attr_ids):
        dupes = sorted({a for a in attr_ids if attr_ids.count(a) > 1})
        report.add(f"duplicate attribute ids: {dupes}")

    return report


# -- parse graphs -----------------------------------------------------------


@dataclass(frozen=True)
class PartState:
    """A grounded part: image position, chosen type, and source proposal."""

    part: NodeId
    x: float
    y: float
    part_type: int
    proposal_ref: str

    def __post_init__(self) -> None:
        if self.part_type < 1:
            raise ValidationError(
                f"part {self.part!r}: part_type must be >= 1, got {self.part_type}"
            )


@dataclass(frozen=True)
class ParseGraph:
    """A fully grounded parse: one state per selected part plus its score.

    ``attribute_assignment`` is empty for parses produced without an
    attribute constraint; a constrained parse maps the constraining
    attribute to its fixed value.
    """

    states: Mapping[NodeId, PartState]
    used_psg_edges: tuple[tuple[NodeId, NodeId], ...]
    used_dg_edges: tuple[tuple[NodeId, NodeId], ...]
    attribute_assignment: Mapping[AttrId, str]
    total_score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", dict(self.states))
        object.__setattr__(self, "used_psg_edges", tuple(map(tuple, self.used_psg_edges)))
        object.__setattr__(self, "used_dg_edges", tuple(map(tuple, self.used_dg_edges)))
        object.__setattr__(self, "attribute_assignment", dict(self.attribute_assignment))
        for part, st in self.states.items():
            if part != st.part:
                raise ValidationError(f"state keyed {part!r} describes part {st.part!r}")

    def to_json_dict(self, grammar: AOGrammar | None = None) -> dict:
        if grammar is not None:
            order = [p for p in grammar.part_ids if p in self.states]
            order.extend(sorted(set(self.states) - set(order)))
        else:
            order = sorted(self.states)
        return {
            "schema_version": SCHEMA_VERSION,
            "states": [
                {
                    "part": p,
                    "x": self.states[p].x,
                    "y": self.states[p].y,
                    "part_type": self.states[p].part_type,
                    "proposal": self.states[p].proposal_ref,
                }
                for p in order
            ],
            "attributes": dict(self.attribute_assignment),
            "total_score": self.total_score,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping, grammar: AOGrammar) -> "ParseGraph":
        try:
            states = {
                str(s["part"]): PartState(
                    part=str(s["part"]),
                    x=float(s["x"]),
                    y=float(s["y"]),
                    part_type=int(s["part_type"]),
                    proposal_ref=str(s["proposal"]),
                )
                for s in doc["states"]
            }
            assignment = {str(k): str(v) for k, v in doc.get("attributes", {}).items()}
            total = float(doc["total_score"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed parse graph document: {exc}") from exc
        present = set(states)
        psg = tuple(e for e in grammar.psg_edges if e[0] in present and e[1] in present)
        dg = tuple(e for e in grammar.dg_edges if e[0] in present and e[1] in present)
        return cls(
            states=states,
            used_psg_edges=psg,
            used_dg_edges=dg,
            attribute_assignment=assignment,
            total_score=total,
        )


def save_parse_graph(pg: ParseGraph, path: str, grammar: AOGrammar | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pg.to_json_dict(grammar), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_parse_graph(path: str, grammar: AOGrammar) -> ParseGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"parse graph file {path}: invalid JSON: {exc}") from exc
    return ParseGraph.from_json_dict(doc, grammar)


def recompute_score(pg: ParseGraph, grammar: AOGrammar, models, scores) -> float:
    """Recompute a parse graph's score from scratch.

    The appearance term follows the objective the parse was produced
    under: with a non-empty attribute assignment every part contributes
    the assigned value's score for each assigned attribute; with an empty
    assignment every part contributes, for each attribute in the grammar,
    its best value score (the unconstrained objective).  Relation terms
    sum the syntactic score over used decomposition edges and the
    geometric score over used dependency edges.
    """
    total = 0.0
    assignment = pg.attribute_assignment
    for part in (p for p in grammar.part_ids if p in pg.states):
        st = pg.states[part]
        if assignment:
            for attr_id, value in assignment.items():
                total += scores.lookup(st.proposal_ref, attr_id, value, part=part)
        else:
            for attr in grammar.attributes:
                total += max(
                    scores.lookup(st.proposal_ref, attr.id, v, part=part) for v in attr.domain
                )
    missing = [p for p in pg.states if not grammar.has_node(p)]
    if missing:
        raise MissingEntryError(f"parse graph states name unknown parts {sorted(missing)}")

    for parent, child in pg.used_psg_edges:
        try:
            ps, cs = pg.states[parent], pg.states[child]
        except KeyError as exc:
            raise MissingEntryError(
                f"used psg edge ({parent!r}, {child!r}) misses state for {exc.args[0]!r}"
            ) from None
        total += models.syntactic.score((parent, child), ps.part_type, cs.part_type)
    for parent, child in pg.used_dg_edges:
        try:
            ps, cs = pg.states[parent], pg.states[child]
        except KeyError as exc:
            raise MissingEntryError(
                f"used dg edge ({parent!r}, {child!r}) misses state for {exc.args[0]!r}"
            ) from None
        total += models.kinematic.score((parent, child), cs.x - ps.x, cs.y - ps.y)
    if not math.isfinite(total):
        raise ValidationError("recomputed parse graph score is not finite")
    return total
