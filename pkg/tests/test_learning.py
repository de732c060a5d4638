"""Learning tests: labeling, table fitting, EM, MI, and associations.

Closed-form fixtures come first in each class; the generative checks
afterwards only assert properties an estimator must have regardless of
its internals (count consistency, trace monotonicity, mean recovery).
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posegrammar.appearance import Proposal
from posegrammar.errors import DegenerateDataError, MissingEntryError, ValidationError
from posegrammar.grammar import ATOMIC_PARTS, AOGrammar, AttributeDef, GrammarNode, NodeKind
from posegrammar.learning import (
    Annotation,
    JointObs,
    annotation_keypoints,
    box_iou,
    derive_associations,
    displacement_samples,
    fit_kinematic,
    fit_syntactic,
    label_proposals,
    learn_models,
    load_annotations,
    mutual_information,
    save_annotations,
)
from posegrammar.relations import validate_association

# A spread-out pose on a 100 x 100 person box, used by the labeling
# fixtures below.  Member centroids: upper_body (50, 38.75),
# lower_body (50, 75), full_body (50, 54.285...).
_JOINTS = {
    "head": (50.0, 10.0),
    "torso": (50.0, 40.0),
    "l_shoulder": (35.0, 30.0),
    "r_shoulder": (65.0, 30.0),
    "l_upper_arm": (30.0, 45.0),
    "l_lower_arm": (25.0, 55.0),
    "r_upper_arm": (70.0, 45.0),
    "r_lower_arm": (75.0, 55.0),
    "l_hip": (40.0, 60.0),
    "r_hip": (60.0, 60.0),
    "l_upper_leg": (40.0, 75.0),
    "l_lower_leg": (40.0, 90.0),
    "r_upper_leg": (60.0, 75.0),
    "r_lower_leg": (60.0, 90.0),
}


def _annotation(visible=(), hidden=(), attributes=None):
    joints = {
        p: JointObs(x=x, y=y, visible=p not in hidden) for p, (x, y) in _JOINTS.items()
    }
    return Annotation(
        joints=joints,
        person_box=(0.0, 0.0, 100.0, 100.0),
        attributes=attributes if attributes is not None else {},
    )


def _prop(pid, x, y, box, part_type=1):
    return Proposal(id=pid, part="head", x=x, y=y, part_type=part_type, box=box)


class TestAnnotation:
    def test_missing_joint_rejected(self):
        joints = {p: JointObs(0.0, 0.0) for p in ATOMIC_PARTS[:-1]}
        with pytest.raises(ValidationError, match="misses joints"):
            Annotation(joints=joints, person_box=(0, 0, 10, 10), attributes={})

    def test_unknown_joint_rejected(self):
        joints = {p: JointObs(0.0, 0.0) for p in ATOMIC_PARTS}
        joints["tail"] = JointObs(0.0, 0.0)
        with pytest.raises(ValidationError, match="unknown joints"):
            Annotation(joints=joints, person_box=(0, 0, 10, 10), attributes={})

    def test_needs_a_visible_joint(self):
        joints = {p: JointObs(0.0, 0.0, visible=False) for p in ATOMIC_PARTS}
        with pytest.raises(ValidationError, match="visible"):
            Annotation(joints=joints, person_box=(0, 0, 10, 10), attributes={})

    def test_degenerate_box_rejected(self):
        joints = {p: JointObs(0.0, 0.0) for p in ATOMIC_PARTS}
        with pytest.raises(ValidationError, match="positive area"):
            Annotation(joints=joints, person_box=(0, 0, 10, 0), attributes={})

    def test_json_round_trip(self, tmp_path):
        ann = _annotation(hidden=("l_lower_leg",), attributes={"hat": "yes", "age": None})
        again = Annotation.from_json_dict(ann.to_json_dict())
        assert again == ann
        path = tmp_path / "anns.jsonl"
        save_annotations([ann, _annotation()], str(path))
        loaded = load_annotations(str(path))
        assert loaded == [ann, _annotation()]

    def test_load_reports_line_numbers(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"person_box": [0, 0, 1, 1]}\n', encoding="utf-8")
        with pytest.raises(ValidationError, match="bad.jsonl:1"):
            load_annotations(str(path))

    def test_keypoints_include_member_centroids(self):
        pts = annotation_keypoints(_annotation())
        assert len(pts) == 17
        np.testing.assert_allclose(pts["lower_body"], (50.0, 75.0), atol=1e-12)
        np.testing.assert_allclose(pts["upper_body"], (50.0, 38.75), atol=1e-12)


class TestBoxIou:
    def test_half_overlap(self):
        np.testing.assert_allclose(
            box_iou((0, 0, 10, 10), (5, 0, 10, 10)), 1.0 / 3.0, atol=1e-15
        )

    def test_identical_boxes(self):
        assert box_iou((2, 3, 7, 9), (2, 3, 7, 9)) == 1.0

    def test_disjoint_boxes(self):
        assert box_iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0

    def test_zero_area_union(self):
        assert box_iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


class TestLabelProposals:
    def test_low_overlap_becomes_negative(self):
        ann = _annotation()
        out = label_proposals(ann, [_prop("n", 250.0, 50.0, (200, 0, 100, 100))])
        assert len(out) == 1
        assert out[0].is_negative
        assert out[0].part is None and out[0].distance is None

    def test_ambiguous_band_is_discarded(self):
        ann = _annotation()
        props = [
            _prop("mid", 50.0, 30.0, (0, 0, 100, 60)),  # overlap 0.6
            _prop("lo", 50.0, 25.0, (0, 0, 100, 50)),  # overlap 0.5, lower bound
            _prop("hi", 50.0, 35.0, (0, 0, 100, 70)),  # overlap 0.7, upper bound
        ]
        assert label_proposals(ann, props) == []

    def test_exact_keypoint_match(self):
        ann = _annotation()
        out = label_proposals(ann, [_prop("h", 50.0, 10.0, (0, 0, 100, 100), part_type=4)])
        assert len(out) == 1
        lp = out[0]
        assert lp.part == "head"
        assert lp.part_type == 4
        assert lp.distance == 0.0

    def test_far_from_every_keypoint_is_dropped(self):
        ann = _annotation()
        out = label_proposals(ann, [_prop("far", 2.0, 2.0, (0, 0, 100, 100))])
        assert out == []

    def test_composite_match_when_box_contains_members(self):
        ann = _annotation()
        out = label_proposals(ann, [_prop("c", 50.0, 75.0, (0, 0, 100, 100))])
        assert [lp.part for lp in out] == ["lower_body"]
        assert out[0].distance == 0.0

    def test_composite_falls_back_to_nearest_atomic(self):
        """The nearest keypoint is lower_body's centroid, but the box cuts
        off the lower legs, so the match falls back to the closest joint."""
        ann = _annotation()
        out = label_proposals(ann, [_prop("c", 49.0, 75.0, (0, 0, 100, 84))])
        assert [lp.part for lp in out] == ["l_upper_leg"]

    def test_order_invariance(self):
        ann = _annotation()
        props = [
            _prop("a", 50.0, 10.0, (0, 0, 100, 100)),
            _prop("b", 250.0, 50.0, (200, 0, 100, 100)),
            _prop("c", 50.0, 75.0, (0, 0, 100, 100)),
        ]
        fwd = {lp.proposal.id: lp.part for lp in label_proposals(ann, props)}
        rev = {lp.proposal.id: lp.part for lp in label_proposals(ann, props[::-1])}
        assert fwd == rev == {"a": "head", "b": None, "c": "lower_body"}


def _toy_grammar():
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
        part_type_count=2,
    )


class TestFitSyntactic:
    def test_single_observation_smoothing(self, grammar):
        """One sample per edge: the observed cell gets 2/82, the rest 1/82."""
        types = {p: 1 for p in grammar.part_ids}
        types["full_body"] = 2
        types["upper_body"] = 3
        ann = _annotation()
        table = fit_syntactic([(ann, types)], grammar)
        np.testing.assert_allclose(
            table.score(("full_body", "upper_body"), 2, 3), math.log(2.0 / 82.0), atol=1e-12
        )
        np.testing.assert_allclose(
            table.score(("full_body", "upper_body"), 1, 1), math.log(1.0 / 82.0), atol=1e-12
        )
        np.testing.assert_allclose(
            table.score(("upper_body", "head"), 3, 1), math.log(2.0 / 82.0), atol=1e-12
        )

    def test_counting_oracle(self):
        g = _toy_grammar()
        ann = _annotation()
        samples = [(1, 1), (1, 2), (1, 1)]
        data = [(ann, {"root": tr, "a": tc, "b": tc}) for tr, tc in samples]
        table = fit_syntactic(data, g)
        np.testing.assert_allclose(
            table.score(("root", "a"), 1, 1), math.log(3.0 / 7.0), atol=1e-12
        )
        np.testing.assert_allclose(
            table.score(("root", "a"), 1, 2), math.log(2.0 / 7.0), atol=1e-12
        )
        np.testing.assert_allclose(
            table.score(("root", "a"), 2, 1), math.log(1.0 / 7.0), atol=1e-12
        )

    def test_uniform_fallback_warns(self):
        g = _toy_grammar()
        ann = _annotation()
        with pytest.warns(UserWarning, match="uniform"):
            table = fit_syntactic([(ann, {"root": 1})], g)
        np.testing.assert_allclose(table.score(("root", "a"), 2, 2), math.log(0.25), atol=1e-12)

    def test_out_of_range_type_rejected(self):
        g = _toy_grammar()
        ann = _annotation()
        with pytest.raises(ValidationError, match="1..2"):
            fit_syntactic([(ann, {"root": 1, "a": 3, "b": 1})], g)


class TestDisplacementSamples:
    def test_offsets_are_child_minus_parent(self, grammar):
        samples = displacement_samples([_annotation()], grammar)
        assert set(samples) == set(grammar.dg_edges)
        np.testing.assert_allclose(samples[("torso", "head")], [(0.0, -30.0)], atol=1e-12)
        np.testing.assert_allclose(samples[("l_hip", "l_upper_leg")], [(0.0, 15.0)], atol=1e-12)

    def test_invisible_joint_excluded(self, grammar):
        anns = [_annotation(), _annotation(hidden=("head",))]
        samples = displacement_samples(anns, grammar)
        assert samples[("torso", "head")].shape == (1, 2)
        assert samples[("torso", "l_shoulder")].shape == (2, 2)


class TestFitKinematic:
    def test_recovers_cluster_means(self):
        rng = np.random.default_rng(0)
        a = rng.normal((10.0, 0.0), 0.1, size=(60, 2))
        b = rng.normal((-10.0, 5.0), 0.1, size=(60, 2))
        X = np.vstack([a, b])
        model = fit_kinematic({("a", "b"): X}, n_components=2, seed=3)
        mix = model.mixtures[("a", "b")]
        means = mix.means[np.argsort(mix.means[:, 0])]
        np.testing.assert_allclose(means[0], (-10.0, 5.0), atol=0.1)
        np.testing.assert_allclose(means[1], (10.0, 0.0), atol=0.1)
        np.testing.assert_allclose(sorted(mix.weights), (0.5, 0.5), atol=0.05)

    def test_trace_never_decreases(self):
        rng = np.random.default_rng(5)
        X = rng.normal(0.0, 3.0, size=(200, 2))
        model = fit_kinematic({("a", "b"): X}, n_components=4, seed=1)
        trace = model.fit_traces[("a", "b")]
        assert len(trace) >= 2
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-9)

    def test_density_peaks_near_the_data(self):
        rng = np.random.default_rng(9)
        X = rng.normal((4.0, -2.0), 0.5, size=(80, 2))
        model = fit_kinematic({("a", "b"): X}, n_components=3, seed=0)
        near = model.score(("a", "b"), 4.0, -2.0)
        far = model.score(("a", "b"), 40.0, 40.0)
        assert near > far + 10.0

    def test_too_few_samples(self):
        with pytest.raises(DegenerateDataError, match="at least 2"):
            fit_kinematic({("a", "b"): np.zeros((1, 2))})

    def test_component_count_reduced_with_warning(self):
        rng = np.random.default_rng(2)
        X = rng.normal(0.0, 1.0, size=(3, 2))
        with pytest.warns(UserWarning, match="only 3 samples"):
            model = fit_kinematic({("a", "b"): X}, n_components=10, seed=0)
        assert model.mixtures[("a", "b")].weights.shape[0] == 3

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValidationError, match=r"\(n, 2\)"):
            fit_kinematic({("a", "b"): np.zeros((4, 3))})
        bad = np.zeros((4, 2))
        bad[1, 0] = np.nan
        with pytest.raises(ValidationError, match="finite"):
            fit_kinematic({("a", "b"): bad})

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(12)
        X = rng.normal(0.0, 2.0, size=(50, 2))
        m1 = fit_kinematic({("a", "b"): X}, n_components=3, seed=7).mixtures[("a", "b")]
        m2 = fit_kinematic({("a", "b"): X}, n_components=3, seed=7).mixtures[("a", "b")]
        assert np.array_equal(m1.weights, m2.weights)
        assert np.array_equal(m1.means, m2.means)
        assert np.array_equal(m1.covariances, m2.covariances)


class TestMutualInformation:
    def test_perfect_dependence_is_ln_two(self):
        a = [True, False, True, False]
        np.testing.assert_allclose(
            mutual_information(a, a), 0.6931471805599453, atol=1e-12
        )

    def test_mixed_table_fixture(self):
        """Counts (4, 1, 1, 4) out of 10: MI = 0.8 ln 1.6 + 0.2 ln 0.4."""
        attr = [False] * 5 + [True] * 5
        part = [False] * 4 + [True] + [False] + [True] * 4
        np.testing.assert_allclose(
            mutual_information(attr, part), 0.19274475702175753, atol=1e-12
        )

    def test_independence_is_zero(self):
        assert mutual_information([True, True, False, False], [True, False, True, False]) == 0.0
        assert mutual_information([True, False], [True, True]) == 0.0

    @given(
        st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60)
    )
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_symmetric(self, pairs):
        a = [p[0] for p in pairs]
        b = [p[1] for p in pairs]
        mi = mutual_information(a, b)
        assert mi >= -1e-12
        np.testing.assert_allclose(mi, mutual_information(b, a), atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="differ in length"):
            mutual_information([True], [True, False])

    def test_empty_input(self):
        with pytest.raises(ValidationError, match="at least one"):
            mutual_information([], [])


class TestDeriveAssociations:
    _LEGS = ("l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg")

    def _mi_map(self, grammar, hot_attr, hot_parts, hi=0.5, lo=0.1):
        mi = {}
        for part in grammar.terminal_ids:
            mi[part] = {}
            for attr in grammar.attributes:
                if attr.id == hot_attr:
                    mi[part][attr.id] = hi if part in hot_parts else lo
                else:
                    mi[part][attr.id] = 0.2
        return mi

    def test_high_mi_parts_plus_ancestors(self, grammar):
        mi = self._mi_map(grammar, "lower_cloth_type", self._LEGS)
        assoc = derive_associations(mi, grammar)
        carrying = {p for p in grammar.part_ids if assoc.contains(p, "lower_cloth_type")}
        assert carrying == set(self._LEGS) | {"lower_body", "full_body"}

    def test_all_equal_mi_associates_nothing(self, grammar):
        mi = self._mi_map(grammar, "hat", hot_parts=(), hi=0.2, lo=0.2)
        assoc = derive_associations(mi, grammar)
        for part in grammar.part_ids:
            assert not assoc.contains(part, "hat")

    def test_missing_part_rejected(self, grammar):
        mi = self._mi_map(grammar, "hat", ("head",))
        del mi["torso"]
        with pytest.raises(MissingEntryError, match="torso"):
            derive_associations(mi, grammar)

    def test_missing_attribute_rejected(self, grammar):
        mi = self._mi_map(grammar, "hat", ("head",))
        del mi["head"]["gender"]
        with pytest.raises(MissingEntryError, match="gender"):
            derive_associations(mi, grammar)

    def test_mi_provenance_preserved(self, grammar):
        mi = self._mi_map(grammar, "hat", ("head",))
        assoc = derive_associations(mi, grammar)
        assert assoc.mi["head"]["hat"] == 0.5


class TestLearnModels:
    def test_full_fit_from_type_samples(self, grammar, quick_models):
        assert set(quick_models.syntactic.tables) == set(grammar.psg_edges)
        assert set(quick_models.kinematic.mixtures) == set(grammar.dg_edges)
        assert validate_association(quick_models.association, grammar).violations == []
        assert quick_models.part_type_count == grammar.part_type_count

    def test_empty_corpus(self, grammar):
        with pytest.raises(DegenerateDataError, match="at least one"):
            learn_models([], grammar)

    def test_misaligned_type_samples(self, grammar):
        ann = _annotation(attributes={a.id: a.domain[0] for a in grammar.attributes})
        with pytest.raises(ValidationError, match="one-to-one"):
            learn_models([ann, ann], grammar, type_samples=[{}])

    def test_misaligned_proposal_groups(self, grammar):
        ann = _annotation(attributes={a.id: a.domain[0] for a in grammar.attributes})
        with pytest.raises(ValidationError, match="one-to-one"):
            learn_models([ann, ann], grammar, proposal_groups=[[]])

    def test_types_recovered_from_proposal_groups(self, grammar):
        """Proposals sitting on the joints get labeled and feed the tables."""
        attrs = {a.id: a.domain[0] for a in grammar.attributes}
        anns = [_annotation(attributes=attrs) for _ in range(2)]
        # One proposal on the head joint, one on the upper-body centroid;
        # both carry part type 2, so the decomposition edge between them
        # is observed at cell (2, 2) once per annotation.
        targets = (("head", _JOINTS["head"]), ("upper", (50.0, 38.75)))
        groups = []
        for _ in anns:
            group = [
                Proposal(
                    id=f"g{j}",
                    part="head",
                    x=x,
                    y=y,
                    part_type=2,
                    box=(0.0, 0.0, 100.0, 100.0),
                )
                for j, (_name, (x, y)) in enumerate(targets)
            ]
            groups.append(group)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            models = learn_models(anns, grammar, proposal_groups=groups, n_components=2)
        np.testing.assert_allclose(
            models.syntactic.score(("upper_body", "head"), 2, 2), math.log(3.0 / 83.0), atol=1e-12
        )
        np.testing.assert_allclose(
            models.syntactic.score(("upper_body", "head"), 1, 1), math.log(1.0 / 83.0), atol=1e-12
        )

    def test_deterministic_fit(self, grammar):
        from posegrammar.evaluation import make_training_pairs

        anns, types = make_training_pairs(40, seed=11, grammar=grammar)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m1 = learn_models(anns, grammar, type_samples=types, n_components=3, seed=5)
            m2 = learn_models(anns, grammar, type_samples=types, n_components=3, seed=5)
        assert m1.to_json_dict() == m2.to_json_dict()
