from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from src.errors import (AlignmentError, ConfigError, DegenerateMetricError, InsufficientPairsError,
                        ZeroDenominatorError)
from src.geometry import (BoundingBox, DetectedObject, ImageDetections, Pattern, PoisoningPolicy,
                          iou, poison_bb)
from src.ml_utils import auroc
from src.verification import (NONTRIGGER, TRIGGER, Metric, PairedObject, PairedObjectSet, Population,
                              Suspect, d_iou, d_scale, eta_sensitivity, inconsistency_histogram,
                              pair_objects, response_vs_clean, suspiciousness_score, verify)


def image(image_id, boxes, categories=None):
    categories = categories or [0] * len(boxes)
    return ImageDetections(image_id, 100.0, 100.0,
                           tuple(DetectedObject(c, BoundingBox(*bb)) for bb, c in zip(boxes, categories)))


def pair(box_f, box_g, is_trigger=False):
    of, og = DetectedObject(0, BoundingBox(*box_f)), DetectedObject(0, BoundingBox(*box_g))
    return PairedObject("img", 0, 0, of, og, is_trigger, iou(of.bbox, og.bbox))


def key_set():
    """Six images, four objects each; object 0 of every image is a trigger object."""
    rng = np.random.default_rng(5)
    dets, flags = [], {}
    for i in range(6):
        boxes = [(float(x), float(y), float(w), float(h)) for x, y, w, h in zip(
            rng.uniform(30, 70, 4), rng.uniform(30, 70, 4), rng.uniform(5, 15, 4), rng.uniform(5, 15, 4))]
        dets.append(image(f"k-{i}", boxes, [0, 1, 2, 0]))
        flags[f"k-{i}"] = (True, False, False, False)
    return dets, flags


def backdoored(dets, flags, policy):
    """A copy of f whose trigger boxes carry the exact backdoor."""
    out = []
    for d in dets:
        objects = [DetectedObject(o.category, poison_bb(o.bbox, policy, d.width, d.height)) if flag else o
                   for o, flag in zip(d.objects, flags[d.image_id])]
        out.append(d.with_objects(objects))
    return out


@st.composite
def pairing_instances(draw):
    """One image seen by f and g: g's boxes are jittered copies of f's or unrelated boxes."""
    nf = draw(st.integers(min_value=1, max_value=4))
    ng = draw(st.integers(min_value=1, max_value=4))
    rng = np.random.default_rng(draw(st.integers(min_value=0, max_value=2**31 - 1)))
    f_boxes = [tuple(rng.uniform([20, 20, 5, 5], [80, 80, 30, 30])) for _ in range(nf)]
    g_boxes = []
    for _ in range(ng):
        if rng.random() < 0.7:
            a, b, w, h = f_boxes[rng.integers(nf)]
            g_boxes.append((a + rng.normal(0, 1.5), b + rng.normal(0, 1.5),
                            w * rng.uniform(0.8, 1.25), h * rng.uniform(0.8, 1.25)))
        else:
            g_boxes.append(tuple(rng.uniform([20, 20, 5, 5], [80, 80, 30, 30])))
    f = image("x", f_boxes, [int(c) for c in rng.integers(0, 2, size=nf)])
    g = image("x", g_boxes, [int(c) for c in rng.integers(0, 2, size=ng)])
    flags = {"x": tuple(bool(v) for v in rng.random(nf) < 0.3)}
    eta = draw(st.floats(min_value=0.3, max_value=0.9))
    return f, g, flags, eta


class TestPairing:
    def test_identical_sets_self_pair(self):
        dets, flags = key_set()
        pairs = pair_objects(dets, dets, flags, eta=0.7)
        assert pairs.n_pairs == 24
        assert all(p.iou == 1.0 and p.index_f == p.index_g for p in pairs.pairs)
        assert pairs.n_trigger == 6

    def test_category_must_match(self):
        f = [image("x", [(50, 50, 10, 10)], [0])]
        g = [image("x", [(50, 50, 10, 10)], [1])]
        assert pair_objects(f, g, {"x": (False,)}).n_pairs == 0

    def test_highest_iou_wins(self):
        f = [image("x", [(50.0, 50.0, 10.0, 10.0)])]
        # widths giving IoU 0.9 and 0.75 against the f box
        g = [image("x", [(50.0, 50.0, 10.0 / 0.75, 10.0), (50.0, 50.0, 10.0 / 0.9, 10.0)])]
        pairs = pair_objects(f, g, {"x": (True,)}, eta=0.7)
        assert pairs.n_pairs == 1
        assert pairs.pairs[0].index_g == 1
        assert pairs.pairs[0].iou == pytest.approx(0.9)

    def test_iou_at_eta_is_not_paired(self):
        f = [image("x", [(50.0, 50.0, 10.0, 10.0)])]
        g = [image("x", [(50.0, 50.0, 20.0, 10.0)])]
        assert pair_objects(f, g, {"x": (False,)}, eta=0.5).n_pairs == 0
        assert pair_objects(f, g, {"x": (False,)}, eta=0.49).n_pairs == 1

    def test_one_sided_images_are_skipped(self):
        f = [image("a", [(50, 50, 10, 10)]), image("b", [(50, 50, 10, 10)])]
        g = [image("a", [(50, 50, 10, 10)]), image("c", [(50, 50, 10, 10)])]
        pairs = pair_objects(f, g, {"a": (False,), "b": (False,)})
        assert pairs.n_pairs == 1
        assert pairs.skipped_images == ("b", "c")

    def test_flags_must_align(self):
        f = [image("a", [(50, 50, 10, 10), (20, 20, 5, 5)])]
        with pytest.raises(AlignmentError):
            pair_objects(f, f, {"a": (True,)})
        with pytest.raises(AlignmentError):
            pair_objects(f, f, {})

    @pytest.mark.parametrize("eta", [0.0, 1.0, 1.5])
    def test_eta_range(self, eta):
        with pytest.raises(ConfigError):
            pair_objects([], [], {}, eta=eta)

    @settings(max_examples=10_000, derandomize=True, deadline=None,
              suppress_health_check=[HealthCheck.too_slow])
    @given(pairing_instances())
    def test_randomized_instances(self, instance):
        f, g, flags, eta = instance
        pairs = pair_objects([f], [g], flags, eta=eta).pairs
        assert len({p.index_f for p in pairs}) == len(pairs)
        assert len({p.index_g for p in pairs}) == len(pairs)
        for p in pairs:
            assert p.object_f.category == p.object_g.category
            assert p.iou > eta
            assert p.iou == iou(f.objects[p.index_f].bbox, g.objects[p.index_g].bbox)
            assert p.is_trigger == flags["x"][p.index_f]
        assert {(p.index_f, p.index_g) for p in pairs} == exhaustive_best(f, g, eta)


def exhaustive_best(f, g, eta):
    """Matching whose descending IoU sequence is lexicographically largest."""
    weight = {}
    for i, of in enumerate(f.objects):
        for j, og in enumerate(g.objects):
            value = iou(of.bbox, og.bbox)
            if of.category == og.category and value > eta:
                weight[(i, j)] = value

    best = (None, frozenset())

    def walk(i, used, chosen):
        nonlocal best
        if i == len(f.objects):
            key = sorted((weight[e] for e in chosen), reverse=True)
            if best[0] is None or key > best[0]:
                best = (key, frozenset(chosen))
            return
        walk(i + 1, used, chosen)
        for j in range(len(g.objects)):
            if j not in used and (i, j) in weight:
                walk(i + 1, used | {j}, chosen + [(i, j)])

    walk(0, frozenset(), [])
    return set(best[1])


class TestMetrics:
    def test_d_iou(self):
        assert d_iou(pair((5, 5, 4, 2), (5, 5, 4, 2))) == 0.0
        assert d_iou(pair((1, 1, 2, 2), (2, 1, 2, 2))) == pytest.approx(2 / 3)
        assert d_iou(pair((50, 50, 10, 10), (50, 50, 20, 10))) == pytest.approx(0.5)

    def test_d_scale_examples(self):
        assert d_scale(pair((50, 50, 10, 10), (50, 50, 12, 12)), 1.2, 1.2) == pytest.approx(1.44)
        assert d_scale(pair((50, 50, 10, 10), (50, 50, 8, 8)), 0.8, 0.8) == pytest.approx(1.5625)
        assert d_scale(pair((50, 50, 10, 10), (50, 50, 10, 10)), 0.9, 1.3) == 1.0

    def test_pair_accessors(self):
        p = pair((50, 50, 10, 10), (50, 50, 12, 12), True)
        assert p.d_iou == pytest.approx(d_iou(p))
        assert p.d_scale(1.2, 1.2) == pytest.approx(1.44)
        assert p.area_ratio == pytest.approx(1.44)

    def test_d_scale_identity_is_degenerate(self):
        with pytest.raises(DegenerateMetricError):
            d_scale(pair((50, 50, 10, 10), (50, 50, 12, 12)), 1.0, 1.0)

    def test_score_examples(self):
        trig = [pair((50, 50, 10, 10), (50, 50, 12, 12), True)] * 2
        rest = [pair((50, 50, 10, 10), (50, 50, 10, 10))] * 3
        policy = PoisoningPolicy(1.2, 1.2)
        assert suspiciousness_score(PairedObjectSet(tuple(trig + rest), 0.5), policy=policy) == pytest.approx(1.44)
        same = [pair((50, 50, 10, 10), (50, 50, 11, 11), flag) for flag in (True, False, False)]
        assert suspiciousness_score(PairedObjectSet(tuple(same), 0.5), policy=policy) == pytest.approx(1.0)

    def test_score_ignores_image_names_and_pair_order(self):
        dets, flags = key_set()
        policy = PoisoningPolicy(1.2, 1.2)
        rng = np.random.default_rng(8)
        g = [d.with_objects([DetectedObject(o.category, BoundingBox(o.bbox.a, o.bbox.b, o.bbox.w * s, o.bbox.h))
                             for o, s in zip(d.objects, rng.uniform(0.97, 1.03, len(d.objects)))])
             for d in backdoored(dets, flags, policy)]
        pairs = pair_objects(dets, g, flags, eta=0.5)
        for metric in (Metric.SCALE, Metric.IOU):
            base = suspiciousness_score(pairs, metric, policy)
            names = {d.image_id: f"renamed-{k}" for k, d in enumerate(reversed(dets))}
            renamed = pair_objects([replace(d, image_id=names[d.image_id]) for d in reversed(dets)],
                                   [replace(d, image_id=names[d.image_id]) for d in g],
                                   {names[k]: v for k, v in flags.items()}, eta=0.5)
            assert suspiciousness_score(renamed, metric, policy) == pytest.approx(base)
            for _ in range(5):
                order = rng.permutation(pairs.n_pairs)
                shuffled = PairedObjectSet(tuple(pairs.pairs[i] for i in order), pairs.eta)
                assert suspiciousness_score(shuffled, metric, policy) == pytest.approx(base)

    def test_empty_sides(self):
        policy = PoisoningPolicy(1.2, 1.2)
        only_rest = PairedObjectSet((pair((50, 50, 10, 10), (50, 50, 10, 10)),), 0.7)
        with pytest.raises(InsufficientPairsError) as info:
            suspiciousness_score(only_rest, policy=policy)
        assert info.value.side == TRIGGER
        only_trig = PairedObjectSet((pair((50, 50, 10, 10), (50, 50, 10, 10), True),), 0.7)
        with pytest.raises(InsufficientPairsError) as info:
            suspiciousness_score(only_trig, policy=policy)
        assert info.value.side == NONTRIGGER

    def test_zero_denominator_under_iou(self):
        pairs = PairedObjectSet((pair((50, 50, 10, 10), (50, 50, 11, 11), True),
                                 pair((50, 50, 10, 10), (50, 50, 10, 10))), 0.7)
        with pytest.raises(ZeroDenominatorError):
            suspiciousness_score(pairs, Metric.IOU)

    def test_scale_metric_needs_rescale_policy(self):
        pairs = PairedObjectSet((), 0.7)
        with pytest.raises(DegenerateMetricError):
            suspiciousness_score(pairs, Metric.SCALE, PoisoningPolicy(1.0, 1.0))
        with pytest.raises(DegenerateMetricError):
            suspiciousness_score(pairs, Metric.SCALE, PoisoningPolicy(pattern=Pattern.SHIFT, shift_sx=0.1))
        with pytest.raises(ConfigError):
            suspiciousness_score(pairs, Metric.SCALE, None)

    @pytest.mark.parametrize("delta, expected", [(1.05, 1.05 ** 2), (1.2, 1.44), (0.8, 1.5625)])
    def test_exact_backdoor_scores_delta_squared(self, delta, expected):
        dets, flags = key_set()
        policy = PoisoningPolicy(delta, delta)
        pairs = pair_objects(dets, backdoored(dets, flags, policy), flags, eta=0.5)
        assert pairs.n_trigger == 6
        assert suspiciousness_score(pairs, policy=policy) == pytest.approx(expected, rel=1e-12)


class TestAuroc:
    @pytest.mark.parametrize("ext, ben, expected", [
        ([2.0, 1.5], [1.0, 0.9], 1.0),
        ([1.0], [1.0], 0.5),
        ([0.9, 1.5], [1.0, 1.1], 0.5),
    ])
    def test_examples(self, ext, ben, expected):
        assert auroc(ext, ben) == pytest.approx(expected)

    def test_invariant_under_monotone_transform(self, rng):
        ext, ben = rng.normal(1.1, 0.1, 20), rng.normal(1.0, 0.1, 25)
        assert auroc(np.exp(3 * ext), np.exp(3 * ben)) == pytest.approx(auroc(ext, ben))
        assert auroc(ben, ext) == pytest.approx(1 - auroc(ext, ben))


class TestVerify:
    policy = PoisoningPolicy(1.2, 1.2)

    def suspects(self):
        dets, flags = key_set()
        return dets, flags, [
            Suspect("stolen", Population.EXTRACTED, backdoored(dets, flags, self.policy)),
            Suspect("clean", Population.BENIGN, list(dets)),
        ]

    def test_backdoor_against_copy(self):
        dets, flags, suspects = self.suspects()
        report = verify(dets, None, suspects, eta=0.5, policy=self.policy, flags=flags)
        assert report.auroc == 1.0
        assert report.verifiable is True
        assert report.scores(Population.EXTRACTED) == [pytest.approx(1.44)]
        assert report.to_dict()["mean_S"]["benign"] == pytest.approx(1.0)

    def test_copies_carry_no_signal(self):
        dets, flags, _ = self.suspects()
        suspects = [Suspect(f"s{i}", pop, list(dets)) for i, pop in
                    enumerate([Population.EXTRACTED, Population.EXTRACTED, Population.BENIGN])]
        report = verify(dets, None, suspects, eta=0.5, policy=self.policy, flags=flags)
        assert all(s.score == 1.0 for s in report.suspects)
        assert report.auroc == 0.5
        assert report.verifiable is False

    def test_failed_suspect_is_excluded(self):
        dets, flags, suspects = self.suspects()
        no_triggers = [d.with_objects(d.objects[1:]) for d in dets]
        suspects.append(Suspect("broken", Population.EXTRACTED, no_triggers))
        report = verify(dets, None, suspects, eta=0.5, policy=self.policy, flags=flags)
        assert report.auroc == 1.0
        assert [e["suspect"] for e in report.errors] == ["broken"]
        assert report.errors[0]["error"] == "InsufficientPairsError"
        assert report.pairing_table().set_index("name").loc["broken", "error"].startswith("no trigger")

    def test_single_population_has_no_auroc(self):
        dets, flags, suspects = self.suspects()
        report = verify(dets, None, suspects[:1], eta=0.5, policy=self.policy, flags=flags)
        assert report.auroc is None
        assert report.notes

    def test_parallel_matches_sequential(self):
        dets, flags, suspects = self.suspects()
        suspects = suspects * 4
        one = verify(dets, None, suspects, eta=0.5, policy=self.policy, flags=flags)
        many = verify(dets, None, suspects, eta=0.5, policy=self.policy, flags=flags, workers=4)
        assert one.to_dict() == many.to_dict()

    def test_needs_flags_or_model(self):
        dets, _, suspects = self.suspects()
        with pytest.raises(ConfigError):
            verify(dets, None, suspects, policy=self.policy)

    def test_eta_sensitivity(self):
        dets, flags, suspects = self.suspects()
        table = eta_sensitivity(dets, flags, suspects, policy=self.policy, etas=(0.5, 0.6, 0.8))
        assert list(table["eta"]) == [0.5, 0.6, 0.8]
        assert table.loc[0, "auroc"] == 1.0
        # at 0.8 the rescaled trigger boxes no longer pair
        assert table.loc[2, "failed"] == 1


class TestHistograms:
    def test_all_zero_is_one_bin(self):
        table = inconsistency_histogram({NONTRIGGER: [0.0, 0.0, 0.0]})
        assert len(table) == 1
        assert table.loc[0, "bin_left"] == 0.0 and table.loc[0, "median"] == 0.0

    def test_trigger_area_ratio_median(self):
        dets, flags = key_set()
        pairs = pair_objects(dets, backdoored(dets, flags, PoisoningPolicy(1.2, 1.2)), flags, eta=0.5)
        table = inconsistency_histogram(pairs, bins=10)
        medians = table.groupby("group")["median"].first()
        assert medians[TRIGGER] == pytest.approx(1.44)
        assert medians[NONTRIGGER] == pytest.approx(1.0)
        assert table.groupby("group")["count"].sum()[TRIGGER] == 6

    def test_empty_group_is_absent(self):
        table = inconsistency_histogram({TRIGGER: [], NONTRIGGER: [0.1, 0.2]}, bins=4)
        assert set(table["group"]) == {NONTRIGGER}
        assert table["count"].sum() == 2

    def test_response_vs_clean(self):
        dets, flags = key_set()
        groups = response_vs_clean(dets, backdoored(dets, flags, PoisoningPolicy(1.2, 1.2)), flags)
        assert groups[TRIGGER] == pytest.approx([1 - 1 / 1.44] * 6)
        assert groups[NONTRIGGER] == [0.0] * 18
