"""Task metrics: localization AP, agreement-weighted VQA accuracy,
suppression-based classification, CIDEr-D, and referring-expression
accuracy. All functions are pure.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .matching import cxcywh_to_corners

_ARTICLES = {"a", "an", "the"}
_PUNCT = re.compile(r"[^\w\s]")


def box_iou(a, b) -> float:
    """IoU of two cxcywh boxes."""
    ca = cxcywh_to_corners(np.asarray(a, dtype=np.float64))
    cb = cxcywh_to_corners(np.asarray(b, dtype=np.float64))
    ix = max(0.0, min(ca[2], cb[2]) - max(ca[0], cb[0]))
    iy = max(0.0, min(ca[3], cb[3]) - max(ca[1], cb[1]))
    inter = ix * iy
    area_a = (ca[2] - ca[0]) * (ca[3] - ca[1])
    area_b = (cb[2] - cb[0]) * (cb[3] - cb[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def localization_ap(ranked_boxes, gt_boxes, iou_thresh: float = 0.5) -> float:
    """Average precision for one sample under every-point interpolation.

    `ranked_boxes` must already be sorted by descending relevance. Each
    detection greedily claims the highest-IoU unclaimed ground-truth box
    (if IoU >= thresh); AP is the mean over ground-truth instances of the
    precision at each true positive's rank (missed instances contribute 0).
    Zero ground truth is vacuous and scores 1.0 (aggregators exclude it).
    """
    gt = [np.asarray(b, dtype=np.float64) for b in gt_boxes]
    if not gt:
        return 1.0
    claimed = [False] * len(gt)
    precisions = []
    tp = 0
    for rank, det in enumerate(ranked_boxes, start=1):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt):
            if claimed[j]:
                continue
            iou = box_iou(det, g)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            claimed[best_j] = True
            tp += 1
            precisions.append(tp / rank)
    return float(sum(precisions) / len(gt))


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and leading articles, collapse spaces."""
    words = _PUNCT.sub(" ", text.lower()).split()
    while words and words[0] in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def vqa_accuracy(predicted: str, annotator_answers) -> float:
    """min(matching annotators / 3, 1) after normalization."""
    pred = normalize_answer(predicted)
    matches = sum(1 for a in annotator_answers if normalize_answer(a) == pred)
    return min(matches / 3.0, 1.0)


def classify_with_suppression(label_scorer, candidate_labels) -> str:
    """Pick the candidate whose text the model likes best.

    `label_scorer(label) -> total log-likelihood, n_tokens`. Scores are
    length-normalized so short labels get no advantage. Only candidates
    compete; the winner is always a member of the list.
    """
    candidates = list(candidate_labels)
    if not candidates:
        raise ValueError("classify_with_suppression: empty candidate set")
    best_label, best_score = None, -math.inf
    for label in candidates:
        logp, n_tokens = label_scorer(label)
        score = logp / max(1, n_tokens)
        if score > best_score:
            best_label, best_score = label, score
    return best_label


def refexp_accuracy(top_box, gt_box, iou_thresh: float = 0.5) -> int:
    """1 iff the top-relevance box overlaps ground truth at IoU >= thresh."""
    return int(box_iou(top_box, gt_box) >= iou_thresh)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _caption_tokens(text: str):
    return _PUNCT.sub(" ", text.lower()).split()


def _ngram_counts(tokens, n_max=4):
    counts = [Counter() for _ in range(n_max)]
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[n - 1][tuple(tokens[i:i + n])] += 1
    return counts


def cider_d(candidates: dict, references: dict, n_max: int = 4, sigma: float = 6.0):
    """Corpus CIDEr-D. `candidates`: image -> string; `references`:
    image -> list of strings. Returns (mean score, per-image dict).

    tf-idf n-gram vectors for n = 1..4 with idf from the reference corpus,
    candidate counts clipped to the reference count, cosine per order,
    Gaussian length penalty (sigma), averaged over orders, x10.
    """
    images = list(candidates)
    if len(references) < 2:
        raise ValueError("cider_d: need at least 2 images for idf")
    for img in images:
        if not references.get(img):
            raise ValueError(f"cider_d: image {img!r} has no references")

    ref_tokens = {img: [_caption_tokens(r) for r in refs]
                  for img, refs in references.items()}
    doc_freq = Counter()
    for refs in ref_tokens.values():
        seen = set()
        for toks in refs:
            for counts in _ngram_counts(toks, n_max):
                seen.update(counts)
        doc_freq.update(seen)
    log_n_images = math.log(len(references))

    def tfidf_vec(counts_list):
        vecs, norms = [], []
        for counts in counts_list:
            vec = {}
            sq = 0.0
            for ng, tf in counts.items():
                idf = log_n_images - math.log(max(1.0, doc_freq[ng]))
                w = tf * idf
                vec[ng] = w
                sq += w * w
            vecs.append(vec)
            norms.append(math.sqrt(sq))
        return vecs, norms

    per_image = {}
    for img in images:
        cand = _caption_tokens(candidates[img])
        if not cand:
            per_image[img] = 0.0
            continue
        cvecs, cnorms = tfidf_vec(_ngram_counts(cand, n_max))
        score = np.zeros(n_max)
        for rtoks in ref_tokens[img]:
            rvecs, rnorms = tfidf_vec(_ngram_counts(rtoks, n_max))
            penalty = math.exp(-((len(cand) - len(rtoks)) ** 2) / (2 * sigma ** 2))
            for n in range(n_max):
                dot = 0.0
                for ng, w in cvecs[n].items():
                    if ng in rvecs[n]:
                        dot += min(w, rvecs[n][ng]) * rvecs[n][ng]
                if cnorms[n] > 0 and rnorms[n] > 0:
                    score[n] += penalty * dot / (cnorms[n] * rnorms[n])
        per_image[img] = float(10.0 * score.mean() / len(ref_tokens[img]))
    mean = float(np.mean([per_image[i] for i in images])) if images else 0.0
    return mean, per_image


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------

@dataclass
class TaskScore:
    task: str
    split: str
    score: float
    n: int
    seen_score: float | None = None
    unseen_score: float | None = None
    n_seen: int = 0
    n_unseen: int = 0


@dataclass
class MetricReport:
    results: list[TaskScore] = field(default_factory=list)

    def get(self, task: str) -> TaskScore:
        for r in self.results:
            if r.task == task:
                return r
        raise KeyError(task)

    def to_json(self) -> str:
        rows = []
        for r in self.results:
            rows.append({
                "task": r.task, "split": r.split, "score": r.score,
                "seen_score": r.seen_score, "unseen_score": r.unseen_score,
                "n": r.n, "n_seen": r.n_seen, "n_unseen": r.n_unseen,
            })
        return json.dumps({"results": rows}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        data = json.loads(text)
        return MetricReport([TaskScore(**row) for row in data["results"]])
