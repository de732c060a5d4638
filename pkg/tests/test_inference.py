"""Beam search tests: oracle agreement, monotonicity, objectives, ties.

The exhaustive enumerator shares the beam's per-step arithmetic and tie
rule, so wherever the beam covers the whole proposal lattice the two must
agree exactly, not approximately.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from posegrammar.appearance import Proposal, ProposalSet, ScoreTable, synth_scores
from posegrammar.errors import (
    EnumerationLimitError,
    InfeasibleParseError,
    MissingEntryError,
    ValidationError,
)
from posegrammar.grammar import (
    AOGrammar,
    AttributeDef,
    GrammarNode,
    NodeKind,
    ParseGraph,
    PartState,
    recompute_score,
)
from posegrammar.inference import (
    BeamConfig,
    attribute_scores,
    brute_force_parse,
    default_expansion_order,
    parse_constrained,
    parse_unconstrained,
    select_final,
)
from posegrammar.relations import (
    AttributeAssociation,
    KinematicMoG,
    Mixture,
    RelationModels,
    SyntacticTable,
)
from posegrammar.synthetic import two_person_scene


def _toy_grammar(part_type_count=2):
    nodes = (
        GrammarNode("root", NodeKind.AND, "root", ("a", "b")),
        GrammarNode("a", NodeKind.TERMINAL, "a"),
        GrammarNode("b", NodeKind.TERMINAL, "b"),
    )
    return AOGrammar(
        root="root",
        nodes=nodes,
        psg_edges=(("root", "a"), ("root", "b")),
        dg_edges=(("a", "b"),),
        attributes=(AttributeDef("c", "c", ("u", "v")),),
        part_type_count=part_type_count,
    )


def _toy_world(seed, counts=(3, 3, 3), part_type_count=2):
    """Seeded random grammar instance: tables, mixtures, proposals, scores."""
    rng = np.random.default_rng(seed)
    g = _toy_grammar(part_type_count)
    t = part_type_count
    syn_tables = {}
    for e in g.psg_edges:
        m = rng.uniform(0.2, 1.0, size=(t, t))
        syn_tables[e] = m / m.sum()
    syn = SyntacticTable(syn_tables, part_type_count=t)
    mixes = {}
    for e in g.dg_edges:
        w = rng.dirichlet(np.ones(2))
        means = rng.normal(0.0, 10.0, size=(2, 2))
        covs = np.stack([np.eye(2) * rng.uniform(2.0, 6.0) for _ in range(2)])
        mixes[e] = Mixture(weights=w, means=means, covariances=covs)
    kin = KinematicMoG(mixes)
    assoc = AttributeAssociation({p: ("c",) for p in g.part_ids}, ("c",))
    models = RelationModels(syntactic=syn, kinematic=kin, association=assoc, part_type_count=t)
    table = ScoreTable()
    proposals = []
    for part, n in zip(("root", "a", "b"), counts):
        for i in range(n):
            pid = f"{part}{i}"
            proposals.append(
                Proposal(
                    id=pid,
                    part=part,
                    x=float(rng.uniform(0.0, 40.0)),
                    y=float(rng.uniform(0.0, 40.0)),
                    part_type=int(rng.integers(1, t + 1)),
                    box=(0.0, 0.0, 5.0, 5.0),
                )
            )
            for v in ("u", "v"):
                table.set(pid, "c", v, float(rng.normal(0.0, 1.5)))
    pset = ProposalSet.from_proposals(proposals, table, part_type_count=t)
    return g, models, pset


def _lattice_size(pset, parts=("root", "a", "b")):
    n = 1
    for p in parts:
        n *= len(pset.proposals_for(p))
    return n


class TestExpansionOrder:
    def test_default_grammar_order(self, grammar):
        order = default_expansion_order(grammar)
        assert order[0] == "full_body"
        assert len(order) == 17
        assert sorted(order) == sorted(grammar.part_ids)
        position = {p: i for i, p in enumerate(order)}
        for part in order:
            for parent in (grammar.psg_parent(part), grammar.dg_parent(part)):
                if parent is not None:
                    assert position[parent] < position[part]
        # The torso grounds before any limb joint it anchors.
        assert position["torso"] < position["head"]
        assert position["torso"] < position["l_shoulder"]

    def test_explicit_order_accepted(self):
        g, models, pset = _toy_world(0)
        cfg = BeamConfig(expansion_order=("root", "a", "b"))
        pg = parse_constrained(g, models, pset, "c", "u", cfg)
        default = parse_constrained(g, models, pset, "c", "u")
        assert pg.states == default.states
        assert pg.total_score == default.total_score

    def test_order_must_start_at_root(self):
        g, models, pset = _toy_world(0)
        cfg = BeamConfig(expansion_order=("a", "root", "b"))
        with pytest.raises(ValidationError, match="must start at the root"):
            parse_constrained(g, models, pset, "c", "u", cfg)

    def test_order_must_be_permutation(self):
        g, models, pset = _toy_world(0)
        cfg = BeamConfig(expansion_order=("root", "a"))
        with pytest.raises(ValidationError, match="permutation"):
            parse_constrained(g, models, pset, "c", "u", cfg)

    def test_child_cannot_precede_parent(self):
        g, models, pset = _toy_world(0)
        # b's dependency parent is a; placing b first violates the order.
        cfg = BeamConfig(expansion_order=("root", "b", "a"))
        with pytest.raises(ValidationError, match="before its parent"):
            parse_constrained(g, models, pset, "c", "u", cfg)

    def test_beam_width_bound(self):
        with pytest.raises(ValidationError, match="beam_width"):
            BeamConfig(beam_width=0)


class TestBeamMatchesBruteForce:
    """A beam covering the whole lattice must equal the enumerator exactly."""

    @pytest.mark.parametrize("seed", range(8))
    def test_constrained_exact(self, seed):
        g, models, pset = _toy_world(seed, counts=(3, 4, 3))
        full = _lattice_size(pset)
        oracle = brute_force_parse(g, models, pset, ("constrained", "c", "u"))
        beam = parse_constrained(g, models, pset, "c", "u", BeamConfig(beam_width=full))
        assert beam.total_score == oracle.total_score
        assert beam.states == oracle.states
        assert beam.attribute_assignment == oracle.attribute_assignment

    @pytest.mark.parametrize("seed", range(8))
    def test_unconstrained_exact(self, seed):
        g, models, pset = _toy_world(seed + 100, counts=(4, 3, 4))
        full = _lattice_size(pset)
        oracle = brute_force_parse(g, models, pset, "unconstrained")
        beam = parse_unconstrained(g, models, pset, BeamConfig(beam_width=full))
        assert beam.total_score == oracle.total_score
        assert beam.states == oracle.states
        assert beam.attribute_assignment == {}

    def test_used_edges_cover_grammar(self):
        g, models, pset = _toy_world(1)
        pg = parse_constrained(g, models, pset, "c", "u")
        assert pg.used_psg_edges == g.psg_edges
        assert pg.used_dg_edges == g.dg_edges


class TestBeamWidthMonotonicity:
    @pytest.mark.parametrize("seed", range(6))
    def test_score_never_drops_as_width_grows(self, seed):
        g, models, pset = _toy_world(seed + 300, counts=(4, 4, 4))
        full = _lattice_size(pset)
        widths = [1, 2, 4, 8, 16, full]
        scores = [
            parse_constrained(g, models, pset, "c", "v", BeamConfig(beam_width=k)).total_score
            for k in widths
        ]
        for lo, hi in zip(scores, scores[1:]):
            assert hi >= lo
        oracle = brute_force_parse(g, models, pset, ("constrained", "c", "v"))
        assert scores[-1] == oracle.total_score


class TestObjectives:
    def test_constrained_score_matches_recompute(self):
        g, models, pset = _toy_world(7)
        pg = parse_constrained(g, models, pset, "c", "u")
        np.testing.assert_allclose(
            recompute_score(pg, g, models, pset.scores), pg.total_score, rtol=0, atol=1e-9
        )

    def test_unconstrained_score_matches_recompute(self):
        g, models, pset = _toy_world(8)
        pg = parse_unconstrained(g, models, pset)
        np.testing.assert_allclose(
            recompute_score(pg, g, models, pset.scores), pg.total_score, rtol=0, atol=1e-9
        )

    def test_constraint_changes_the_winner(self):
        """Each value pulls the parse toward proposals scoring high on it."""
        g, models, pset = _toy_world(3)
        table = pset.scores
        for i in range(3):
            table.set(f"a{i}", "c", "u", 100.0 if i == 0 else -100.0)
            table.set(f"a{i}", "c", "v", 100.0 if i == 2 else -100.0)
        pg_u = parse_constrained(g, models, pset, "c", "u")
        pg_v = parse_constrained(g, models, pset, "c", "v")
        assert pg_u.states["a"].proposal_ref == "a0"
        assert pg_v.states["a"].proposal_ref == "a2"

    def test_unknown_attribute(self):
        g, models, pset = _toy_world(0)
        with pytest.raises(MissingEntryError, match="unknown attribute"):
            parse_constrained(g, models, pset, "mood", "happy")

    def test_value_outside_domain(self):
        g, models, pset = _toy_world(0)
        with pytest.raises(ValidationError, match="not in domain"):
            parse_constrained(g, models, pset, "c", "w")

    def test_unknown_objective_token(self):
        g, models, pset = _toy_world(0)
        with pytest.raises(ValidationError, match="unknown objective"):
            brute_force_parse(g, models, pset, "freestyle")

    def test_empty_bucket_is_infeasible(self):
        g, models, pset = _toy_world(0)
        empty = ProposalSet(
            {"root": pset.proposals_for("root"), "a": pset.proposals_for("a")},
            pset.scores,
            part_type_count=2,
        )
        with pytest.raises(InfeasibleParseError, match="part 'b' has no proposals"):
            parse_constrained(g, models, empty, "c", "u")


class TestTieBreaking:
    def test_exact_tie_falls_to_lexicographic_ids(self):
        """Identical scores resolve by the tuple of proposal ids."""
        g, models, pset = _toy_world(5)
        table = pset.scores
        # Make the two root proposals indistinguishable by score.
        rows = pset.proposals_for("root")
        clones = [
            Proposal(id=f"rt{i}", part="root", x=1.0, y=2.0, part_type=1, box=(0, 0, 5, 5))
            for i in range(2)
        ]
        for p in clones:
            table.set(p.id, "c", "u", 0.5)
            table.set(p.id, "c", "v", 0.5)
        pset2 = ProposalSet(
            {"root": clones, "a": pset.proposals_for("a"), "b": pset.proposals_for("b")},
            table,
            part_type_count=2,
        )
        pg = parse_constrained(g, models, pset2, "c", "u")
        assert pg.states["root"].proposal_ref == "rt0"
        oracle = brute_force_parse(g, models, pset2, ("constrained", "c", "u"))
        assert oracle.states["root"].proposal_ref == "rt0"


class TestEnumerationGuard:
    def test_brute_force_refuses_large_lattices(self):
        table = ScoreTable()
        proposals = []
        for part in ("root", "a", "b"):
            for i in range(500):
                pid = f"{part}{i}"
                proposals.append(
                    Proposal(id=pid, part=part, x=0.0, y=0.0, part_type=1, box=(0, 0, 5, 5))
                )
                table.set(pid, "c", "u", 0.0)
                table.set(pid, "c", "v", 0.0)
        pset = ProposalSet.from_proposals(proposals, table, part_type_count=2)
        g, models, _ = _toy_world(0)
        with pytest.raises(EnumerationLimitError, match="exceed the guard"):
            brute_force_parse(g, models, pset, ("constrained", "c", "u"))


def _partial_total(g, models, pset, assigned, attr=None, value=None):
    """Independent score of a partial assignment, summed per edge."""
    total = 0.0
    for part, st in assigned.items():
        if attr is not None:
            total += pset.scores.lookup(st.proposal_ref, attr, value)
        else:
            for a in g.attributes:
                total += max(pset.scores.lookup(st.proposal_ref, a.id, v) for v in a.domain)
    for p, c in g.psg_edges:
        if p in assigned and c in assigned:
            total += models.syntactic.score((p, c), assigned[p].part_type, assigned[c].part_type)
    for p, c in g.dg_edges:
        if p in assigned and c in assigned:
            total += models.kinematic.score(
                (p, c), assigned[c].x - assigned[p].x, assigned[c].y - assigned[p].y
            )
    return total


class TestBeamTrace:
    def test_partial_scores_audit(self):
        """Every traced prefix's score equals an independent recomputation."""
        g, models, pset = _toy_world(11, counts=(3, 3, 3))
        trace: list = []
        parse_constrained(
            g, models, pset, "c", "u", BeamConfig(beam_width=4), collect_trace=trace
        )
        assert len(trace) == 3
        audited = 0
        for step_entries in trace:
            assert 1 <= len(step_entries) <= 4
            for partial in step_entries:
                expected = _partial_total(g, models, pset, partial.assigned, "c", "u")
                np.testing.assert_allclose(partial.score, expected, rtol=0, atol=1e-9)
                audited += 1
        assert audited >= 6

    def test_trace_depths_grow_by_one(self):
        g, models, pset = _toy_world(11)
        trace: list = []
        parse_unconstrained(g, models, pset, BeamConfig(beam_width=2), collect_trace=trace)
        for depth, entries in enumerate(trace, start=1):
            for partial in entries:
                assert len(partial.assigned) == depth


class TestSelectFinal:
    def test_rigged_pair_wins(self):
        g, models, pset = _toy_world(13)
        for part, n in (("root", 3), ("a", 3), ("b", 3)):
            for i in range(n):
                pset.scores.set(f"{part}{i}", "c", "v", 25.0)
        best, per_pair = select_final(g, models, pset)
        assert set(per_pair) == {("c", "u"), ("c", "v")}
        assert best.attribute_assignment == {"c": "v"}
        assert best.total_score == per_pair[("c", "v")].total_score

    def test_exact_tie_keeps_first_pair(self):
        g, models, pset = _toy_world(13)
        for part, n in (("root", 3), ("a", 3), ("b", 3)):
            for i in range(n):
                s = pset.scores.lookup(f"{part}{i}", "c", "u")
                pset.scores.set(f"{part}{i}", "c", "v", s)
        best, per_pair = select_final(g, models, pset)
        assert per_pair[("c", "u")].total_score == per_pair[("c", "v")].total_score
        assert best.attribute_assignment == {"c": "u"}

    def test_empty_pair_list_rejected(self):
        g, models, pset = _toy_world(13)
        with pytest.raises(ValidationError, match="at least one"):
            select_final(g, models, pset, attr_values=[])

    def test_two_person_scene_exact_argmax_stays_on_target(self, grammar, quick_models):
        """With the distractor's attribute evidence incoherent, the exact
        constrained argmax under the target's true value picks the
        target's proposal at all 17 parts."""
        scene = two_person_scene(seed=21)
        truth = scene.persons[0].attributes
        pset = synth_scores(scene, noise_sigma=0.0, rng_seed=4)
        pg = brute_force_parse(
            grammar, quick_models, pset, ("constrained", "gender", truth["gender"])
        )
        for st in pg.states.values():
            assert st.proposal_ref.startswith("p0.")


class TestAttributeScores:
    def test_masked_sums(self):
        table = ScoreTable()
        table.set("ph", "hat", "yes", 2.0)
        table.set("ph", "hat", "no", -1.0)
        table.set("pt", "hat", "yes", 5.0)
        table.set("pt", "hat", "no", 0.5)
        pset = ProposalSet(
            {
                "head": (Proposal(id="ph", part="head", x=0, y=0, part_type=1, box=(0, 0, 2, 2)),),
                "torso": (Proposal(id="pt", part="torso", x=0, y=0, part_type=1, box=(0, 0, 2, 2)),),
            },
            table,
        )
        assoc = AttributeAssociation(
            parts={"head": ("hat",), "torso": ()}, attr_ids=("hat",)
        )
        states = {
            "head": PartState("head", 0.0, 0.0, 1, "ph"),
            "torso": PartState("torso", 0.0, 0.0, 1, "pt"),
        }
        per_pair = {
            ("hat", "yes"): ParseGraph(states, (), (), {"hat": "yes"}, 0.0),
            ("hat", "no"): ParseGraph(states, (), (), {"hat": "no"}, 0.0),
        }
        scores = attribute_scores(per_pair, pset, assoc)
        # Only the head is associated with hat; torso's 5.0 is masked out.
        np.testing.assert_allclose(scores["hat"]["yes"], 2.0, atol=1e-12)
        np.testing.assert_allclose(scores["hat"]["no"], -1.0, atol=1e-12)


class TestDeterminism:
    def test_repeat_runs_serialize_identically(self):
        g, models, pset = _toy_world(17, counts=(4, 4, 4))
        a = parse_constrained(g, models, pset, "c", "u", BeamConfig(beam_width=8))
        b = parse_constrained(g, models, pset, "c", "u", BeamConfig(beam_width=8))
        assert a.to_json_dict(g) == b.to_json_dict(g)

    def test_width_one_returns_complete_parse(self):
        g, models, pset = _toy_world(19)
        pg = parse_unconstrained(g, models, pset, BeamConfig(beam_width=1))
        assert set(pg.states) == {"root", "a", "b"}
        assert math.isfinite(pg.total_score)
