"""Skill-concept holdout splits.

Concepts are assigned to two holdout groups (one per skill pair) plus a
shared set. Samples of a task whose text or concept exposes that task's
held-out concepts are dropped from train/val; test samples are
partitioned into seen/unseen per task. Held-out concepts stay visible
through the other skill group's tasks, which is the transfer premise the
audit verifies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .language import word_tokens
from .shapes import plural
from .taskgen import TASKS, TaskSample

# task -> holdout group attribute (None: no concepts are held out)
HOLDOUT_GROUP = {
    "vqa": "h_vqa_cap",
    "captioning": "h_vqa_cap",
    "classification": "h_cls_loc",
    "localization": "h_cls_loc",
    "refexp": None,
}


@dataclass
class SceSplitSpec:
    h_vqa_cap: tuple
    h_cls_loc: tuple
    s: tuple
    pinned: tuple = ()

    def __post_init__(self):
        self.h_vqa_cap = tuple(self.h_vqa_cap)
        self.h_cls_loc = tuple(self.h_cls_loc)
        self.s = tuple(self.s)
        self.pinned = tuple(self.pinned)
        a, b, c = set(self.h_vqa_cap), set(self.h_cls_loc), set(self.s)
        if a & b or a & c or b & c:
            raise ValueError("holdout groups and shared set must be disjoint")
        if not set(self.pinned) <= c:
            raise ValueError("pinned concepts must belong to the shared set")

    @property
    def concepts(self):
        return set(self.h_vqa_cap) | set(self.h_cls_loc) | set(self.s)

    def holdout_for(self, task: str):
        group = HOLDOUT_GROUP[task]
        return () if group is None else getattr(self, group)

    def to_dict(self):
        return {"h_vqa_cap": list(self.h_vqa_cap), "h_cls_loc": list(self.h_cls_loc),
                "s": list(self.s), "pinned": list(self.pinned)}

    @staticmethod
    def from_dict(d):
        return SceSplitSpec(h_vqa_cap=d["h_vqa_cap"], h_cls_loc=d["h_cls_loc"],
                            s=d["s"], pinned=d.get("pinned", ()))


def random_split_spec(concepts, seed, holdout_per_group=2, pinned=()) -> SceSplitSpec:
    concepts = list(concepts)
    if len(concepts) < 3 * holdout_per_group:
        raise ValueError("not enough concepts to build holdout groups")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    eligible = [c for c in concepts if c not in set(pinned)]
    picked = [str(c) for c in rng.choice(eligible, size=2 * holdout_per_group, replace=False)]
    h_vqa_cap = tuple(sorted(picked[:holdout_per_group]))
    h_cls_loc = tuple(sorted(picked[holdout_per_group:]))
    held = set(h_vqa_cap) | set(h_cls_loc)
    s = tuple(sorted(c for c in concepts if c not in held))
    return SceSplitSpec(h_vqa_cap=h_vqa_cap, h_cls_loc=h_cls_loc, s=s, pinned=tuple(pinned))


def concept_word_forms(concepts) -> set[str]:
    forms = set()
    for c in concepts:
        forms.add(c)
        forms.add(plural(c))
    return forms


def sample_mentions(sample: TaskSample, holdout) -> str | None:
    """First held-out word form found in concept label, prompt, or target."""
    if not holdout:
        return None
    forms = concept_word_forms(holdout)
    if sample.concept in set(holdout):
        return sample.concept
    for text in (sample.prompt, sample.target_text or ""):
        for w in word_tokens(text):
            if w in forms:
                return w
    return None


def _exposes(sample: TaskSample, task: str, holdout) -> bool:
    if not holdout:
        return False
    if task in ("classification", "localization"):
        return sample.concept in set(holdout)
    return sample_mentions(sample, holdout) is not None


@dataclass
class SceSplit:
    spec: SceSplitSpec
    train: list = field(default_factory=list)          # sample ids, all tasks
    val: list = field(default_factory=list)
    test_seen: dict = field(default_factory=dict)      # task -> sample ids
    test_unseen: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "spec": self.spec.to_dict(),
            "train": self.train,
            "val": self.val,
            "test_seen": self.test_seen,
            "test_unseen": self.test_unseen,
        }, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceSplit":
        d = json.loads(text)
        return SceSplit(spec=SceSplitSpec.from_dict(d["spec"]), train=d["train"],
                        val=d["val"], test_seen=d["test_seen"],
                        test_unseen=d["test_unseen"])

    def ids_for(self, part: str, task: str):
        if part == "test_seen":
            return list(self.test_seen.get(task, []))
        if part == "test_unseen":
            return list(self.test_unseen.get(task, []))
        if part == "test":
            return list(self.test_seen.get(task, [])) + list(self.test_unseen.get(task, []))
        if part in ("train", "val"):
            return list(getattr(self, part))
        raise ValueError(f"unknown split part {part!r}")


def make_sce_split(samples_by_task: dict[str, list[TaskSample]], spec: SceSplitSpec,
                   seed: int, train_image_ids, test_image_ids,
                   extra_val_image_ids=()) -> SceSplit:
    """80/20 the train images into train/val, filter each task's train/val
    by its holdout group, and partition test samples into seen/unseen."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    train_imgs = list(train_image_ids)
    perm = rng.permutation(len(train_imgs))
    n_train = int(round(0.8 * len(train_imgs)))
    train_set = {train_imgs[i] for i in perm[:n_train]}
    val_set = {train_imgs[i] for i in perm[n_train:]} | set(extra_val_image_ids)
    test_set = set(test_image_ids)

    split = SceSplit(spec=spec)
    for task in TASKS:
        holdout = spec.holdout_for(task)
        n_train_kept = 0
        for s in samples_by_task.get(task, []):
            src = _source_image(s)
            if src in test_set:
                if _exposes(s, task, holdout):
                    split.test_unseen.setdefault(task, []).append(s.id)
                else:
                    split.test_seen.setdefault(task, []).append(s.id)
            elif src in train_set:
                if not _exposes(s, task, holdout):
                    split.train.append(s.id)
                    n_train_kept += 1
            elif src in val_set:
                if not _exposes(s, task, holdout):
                    split.val.append(s.id)
        split.test_seen.setdefault(task, [])
        split.test_unseen.setdefault(task, [])
        if samples_by_task.get(task) and n_train_kept == 0:
            raise ValueError(f"holdout group empties the train set for task {task!r}")
    return split


def _source_image(sample: TaskSample) -> str:
    # classification samples point at crop ids "<image>:crop:<concept>"
    return sample.image.split(":", 1)[0]


def audit_split(samples_by_id: dict[str, TaskSample], split: SceSplit):
    """Scan train/val for each task's held-out words; returns leak records."""
    leaks = []
    for part in ("train", "val"):
        for sid in getattr(split, part):
            s = samples_by_id[sid]
            holdout = split.spec.holdout_for(s.task)
            word = sample_mentions(s, holdout)
            if word is not None:
                leaks.append({"part": part, "task": s.task, "sample_id": sid,
                              "word": word})
    return leaks


def transfer_exposure(samples_by_id: dict[str, TaskSample], split: SceSplit):
    """For each held-out concept, count train samples of the *other* skill
    group's tasks that mention it (the cross-skill exposure the split is
    designed to preserve)."""
    counts = {c: 0 for c in split.spec.h_vqa_cap + split.spec.h_cls_loc}
    for sid in split.train:
        s = samples_by_id[sid]
        group = HOLDOUT_GROUP[s.task]
        if group is None:
            continue
        other = split.spec.h_cls_loc if group == "h_vqa_cap" else split.spec.h_vqa_cap
        for concept in other:
            if sample_mentions(s, (concept,)):
                counts[concept] += 1
    return counts
