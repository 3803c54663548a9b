import json
import math

import numpy as np
import pytest

from promptvision.metrics import (
    MetricReport,
    TaskScore,
    box_iou,
    cider_d,
    classify_with_suppression,
    localization_ap,
    normalize_answer,
    refexp_accuracy,
    vqa_accuracy,
)


def shifted(box, dx=0.0, dy=0.0):
    return [box[0] + dx, box[1] + dy, box[2], box[3]]


class TestLocalizationAp:
    def test_worked_example_tfft(self):
        # 2 gt, top-4 correctness {T, F, F, T} -> (1/1 + 2/4)/2 = 0.75
        gt = [[0.25, 0.25, 0.1, 0.1], [0.75, 0.75, 0.1, 0.1]]
        ranked = [
            gt[0],                      # T
            [0.5, 0.5, 0.05, 0.05],     # F
            [0.25, 0.75, 0.05, 0.05],   # F
            gt[1],                      # T
        ]
        assert localization_ap(ranked, gt) == 0.75

    def test_all_correct(self):
        gt = [[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]]
        assert localization_ap(list(gt), gt) == 1.0

    def test_false_then_true_single_gt(self):
        gt = [[0.5, 0.5, 0.2, 0.2]]
        ranked = [[0.1, 0.1, 0.05, 0.05], gt[0]]
        assert localization_ap(ranked, gt) == 0.5

    def test_duplicate_detection_not_double_counted(self):
        gt = [[0.5, 0.5, 0.2, 0.2]]
        ranked = [gt[0], gt[0]]
        assert localization_ap(ranked, gt) == 1.0

    def test_missed_instances_count_against(self):
        gt = [[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]]
        assert localization_ap([gt[0]], gt) == 0.5

    def test_empty_gt_vacuous(self):
        assert localization_ap([[0.5, 0.5, 0.1, 0.1]], []) == 1.0

    def test_threshold_inclusive(self):
        gt = [[0.5, 0.5, 0.2, 0.2]]
        det = [0.5, 0.45, 0.2, 0.2]  # overlap 0.15/0.2 height -> IoU = 0.6
        assert box_iou(det, gt[0]) > 0.5
        half = [0.5, 0.5, 0.2, 0.1]  # nested half-area box -> IoU exactly 0.5
        assert abs(box_iou(half, gt[0]) - 0.5) < 1e-12
        assert localization_ap([half], gt) == 1.0


class TestVqaAccuracy:
    def test_full_agreement(self):
        assert vqa_accuracy("red", ["red"] * 10) == 1.0

    def test_no_agreement(self):
        assert vqa_accuracy("red", ["blue"] * 10) == 0.0

    def test_partial_agreement(self):
        answers = ["red"] * 2 + ["blue"] * 8
        assert abs(vqa_accuracy("red", answers) - 2 / 3) < 1e-12

    def test_normalization(self):
        assert vqa_accuracy("The Red.", ["red"] * 10) == 1.0
        assert normalize_answer("A blue square!") == "blue square"

    def test_value_set_for_ten_annotators(self):
        for k in range(11):
            answers = ["x"] * k + ["y"] * (10 - k)
            v = vqa_accuracy("x", answers)
            assert v in {0.0, 1 / 3, 2 / 3, 1.0}


class TestSuppressionClassify:
    def test_dominating_label_wins(self):
        scores = {"circle": (-1.0, 1), "square": (-5.0, 1)}
        assert classify_with_suppression(lambda w: scores[w], ["circle", "square"]) == "circle"

    def test_winner_is_always_candidate(self):
        def scorer(label):
            return (-len(label), 1)
        out = classify_with_suppression(scorer, ["zig", "zag", "zo"])
        assert out in {"zig", "zag", "zo"}

    def test_length_normalization(self):
        # total logp favours the short label; per-token logp favours the long one
        scores = {"a": (-2.0, 1), "b c d": (-4.5, 3)}
        assert classify_with_suppression(lambda w: scores[w], ["a", "b c d"]) == "b c d"

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            classify_with_suppression(lambda w: (0.0, 1), [])


class TestRefexpAccuracy:
    def test_identical(self):
        assert refexp_accuracy([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]) == 1

    def test_disjoint(self):
        assert refexp_accuracy([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]) == 0

    def test_exact_half_iou_inclusive(self):
        a = [0.5, 0.5, 0.2, 0.2]
        b = [0.5, 0.5, 0.2, 0.1]  # contained, half area -> IoU 0.5
        assert abs(box_iou(a, b) - 0.5) < 1e-12
        assert refexp_accuracy(b, a) == 1


# ---------------------------------------------------------------------------
# CIDEr-D against an independent brute-force implementation
# ---------------------------------------------------------------------------

def brute_force_cider(candidates, references, sigma=6.0):
    """Plain-loop CIDEr-D used as the oracle: builds explicit n-gram
    dictionaries per order and computes everything longhand."""
    import re as _re

    def toks(s):
        return _re.sub(r"[^\w\s]", " ", s.lower()).split()

    def grams(tokens, n):
        return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]

    n_images = len(references)
    df = {}
    for img in references:
        in_image = set()
        for ref in references[img]:
            for n in range(1, 5):
                in_image.update(grams(toks(ref), n))
        for g in in_image:
            df[g] = df.get(g, 0) + 1

    def weight(g, count):
        return count * (math.log(n_images) - math.log(max(1.0, df.get(g, 0))))

    per_image = {}
    for img, cand in candidates.items():
        ct = toks(cand)
        if not ct:
            per_image[img] = 0.0
            continue
        total = 0.0
        for ref in references[img]:
            rt = toks(ref)
            pen = math.exp(-((len(ct) - len(rt)) ** 2) / (2 * sigma ** 2))
            for n in range(1, 5):
                cg, rg = grams(ct, n), grams(rt, n)
                c_counts = {g: cg.count(g) for g in set(cg)}
                r_counts = {g: rg.count(g) for g in set(rg)}
                dot = sum(
                    min(weight(g, c_counts[g]), weight(g, r_counts.get(g, 0)))
                    * weight(g, r_counts.get(g, 0))
                    for g in c_counts if g in r_counts
                )
                cn = math.sqrt(sum(weight(g, c) ** 2 for g, c in c_counts.items()))
                rn = math.sqrt(sum(weight(g, c) ** 2 for g, c in r_counts.items()))
                if cn > 0 and rn > 0:
                    total += pen * dot / (cn * rn) / 4.0
        per_image[img] = 10.0 * total / len(references[img])
    mean = sum(per_image.values()) / len(per_image)
    return mean, per_image


FIXTURE_REFS = {
    "img1": ["a red circle near a blue square", "red circle beside blue square"],
    "img2": ["two green triangles on a dark field", "a pair of green triangles"],
    "img3": ["one yellow star above a purple cross"],
}
FIXTURE_CANDS = {
    "img1": "a red circle near a blue square",
    "img2": "two triangles that are green",
    "img3": "a purple cross under a yellow star",
}


class TestCiderD:
    def test_matches_brute_force_on_fixture(self):
        mean, per = cider_d(FIXTURE_CANDS, FIXTURE_REFS)
        bmean, bper = brute_force_cider(FIXTURE_CANDS, FIXTURE_REFS)
        assert abs(mean - bmean) < 1e-9
        for img in per:
            assert abs(per[img] - bper[img]) < 1e-9

    def test_identical_caption_uniform_idf_scores_ten(self):
        # disjoint vocabularies across images -> idf = log 3 for every n-gram
        refs = {
            "a": ["red circle near blue square"],
            "b": ["green triangle over yellow star"],
            "c": ["purple cross beside orange ring"],
        }
        cands = {"a": "red circle near blue square"}
        _, per = cider_d(cands, refs)
        assert abs(per["a"] - 10.0) < 1e-9

    def test_zero_overlap_scores_zero(self):
        refs = {
            "a": ["red circle alone"],
            "b": ["green triangle there"],
        }
        cands = {"a": "purple hexagon floating"}
        _, per = cider_d(cands, refs)
        assert per["a"] == 0.0

    def test_reference_order_invariance(self):
        refs2 = {k: list(reversed(v)) for k, v in FIXTURE_REFS.items()}
        m1, _ = cider_d(FIXTURE_CANDS, FIXTURE_REFS)
        m2, _ = cider_d(FIXTURE_CANDS, refs2)
        assert abs(m1 - m2) < 1e-12

    def test_empty_candidate_scores_zero(self):
        refs = {"a": ["red circle"], "b": ["blue square"]}
        _, per = cider_d({"a": ""}, refs)
        assert per["a"] == 0.0

    def test_single_image_corpus_rejected(self):
        with pytest.raises(ValueError, match="idf"):
            cider_d({"a": "x"}, {"a": ["x"]})


class TestReport:
    def test_json_round_trip(self):
        report = MetricReport([
            TaskScore(task="localization", split="test", score=0.8, n=10,
                      seen_score=0.9, unseen_score=0.5, n_seen=8, n_unseen=2),
        ])
        again = MetricReport.from_json(report.to_json())
        assert again.get("localization").score == 0.8
        parsed = json.loads(report.to_json())
        row = parsed["results"][0]
        assert set(row) == {"task", "split", "score", "seen_score", "unseen_score",
                            "n", "n_seen", "n_unseen"}

    def test_counts_partition(self):
        r = TaskScore(task="vqa", split="test", score=0.5, n=10, n_seen=7, n_unseen=3)
        assert r.n_seen + r.n_unseen == r.n
