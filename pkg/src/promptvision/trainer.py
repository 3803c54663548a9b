"""Multitask training loop and evaluation.

Mini-batches draw tasks uniformly; each sample contributes the loss its
supervision supports (text NLL and/or the box set loss). Vision
parameters are frozen for a prefix of epochs and gradient-clipped once
unfrozen; the backbone runs at a lower peak learning rate. Evaluation
routes every task through the same forward pass and applies the task's
metric with a seen/unseen breakdown.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .crossmodal import CrossModalConfig
from .dataset import Dataset
from .language import LanguageConfig
from .matching import MatchCostCoeffs, hungarian_loss
from .metrics import (
    MetricReport,
    TaskScore,
    cider_d,
    classify_with_suppression,
    localization_ap,
    refexp_accuracy,
    vqa_accuracy,
)
from .model import ModelConfig, PromptModel
from .optim import OptimizerState, adamw_step, clip_global_norm
from .splits import SceSplit
from .taskgen import TASKS, TaskSample
from .tensor import Tape, Tensor, TensorError
from .vision import VisionConfig


class NumericError(RuntimeError):
    """Loss went non-finite; training aborts loudly."""


@dataclass
class TrainConfig:
    tasks: tuple = ("vqa", "captioning", "localization", "classification")
    batch_size: int = 32
    epochs_frozen: int = 2
    epochs_total: int = 10
    steps_per_epoch: int = 0           # 0: ceil(train samples / batch)
    max_lr: float = 5e-4
    backbone_lr_scale: float = 0.1
    warmup_epochs: float = 1.0
    weight_decay: float = 1e-4
    caption_loss_weight: float = 0.05
    grad_clip: float = 0.1             # on vision parameters
    seed: int = 0
    finetune_vision: bool = True       # False = the no-fine-tuning ablation
    eval_samples_per_task: int = 40    # per-epoch validation subset
    eval_batch: int = 32
    label_cost: float = 1.0
    l1_cost: float = 5.0
    giou_cost: float = 2.0
    background_weight: float = 0.1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if self.warmup_epochs >= self.epochs_total:
            raise ValueError("warmup must end before the training horizon")
        if not self.tasks:
            raise ValueError("empty task set")

    @property
    def coeffs(self) -> MatchCostCoeffs:
        return MatchCostCoeffs(label_weight=self.label_cost, l1_weight=self.l1_cost,
                               giou_weight=self.giou_cost,
                               background_weight=self.background_weight)


@dataclass
class LearningCurvePoint:
    n_finetune_samples: int
    refexp_accuracy: float
    retention: dict[str, float]


def sample_minibatch(task_pools: dict[str, list], batch_size: int,
                     rng: np.random.Generator) -> list:
    """Each slot draws a task uniformly, then a sample uniformly within it."""
    tasks = sorted(task_pools)
    for t in tasks:
        if not task_pools[t]:
            raise ValueError(f"task {t!r} has an empty dataset")
    batch = []
    for _ in range(batch_size):
        task = tasks[int(rng.integers(len(tasks)))]
        pool = task_pools[task]
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


def lr_at(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """0 -> max over warmup, then linear decay max -> 0 at the horizon."""
    if step <= warmup_steps:
        return max_lr * step / max(1, warmup_steps)
    frac = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return max_lr * max(0.0, 1.0 - frac)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch derivation keeps resumed runs identical to uninterrupted ones
    return np.random.default_rng(np.random.SeedSequence([seed, 17, epoch]))


class Trainer:
    def __init__(self, dataset: Dataset, split: SceSplit, train_cfg: TrainConfig,
                 model_cfg: ModelConfig | None = None, model: PromptModel | None = None):
        self.dataset = dataset
        self.split = split
        self.cfg = train_cfg
        self.model_cfg = model_cfg or ModelConfig(seed=train_cfg.seed)
        self.model = model or PromptModel(self.model_cfg, dataset.vocab)
        self.params = self.model.parameters()
        self.opt = OptimizerState(weight_decay=train_cfg.weight_decay)
        self.global_step = 0
        self.start_epoch = 0
        self.history: list[dict] = []

        by_id = dataset.by_id
        self.train_pools = {t: [] for t in train_cfg.tasks}
        for sid in split.train:
            s = by_id[sid]
            if s.task in self.train_pools:
                self.train_pools[s.task].append(s)
        for t, pool in self.train_pools.items():
            if not pool:
                raise ValueError(f"no training samples for task {t!r}")
        self.val_pools = {t: [] for t in train_cfg.tasks}
        for sid in split.val:
            s = by_id[sid]
            if s.task in self.val_pools:
                self.val_pools[s.task].append(s)

    # -- schedule -----------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        n = sum(len(p) for p in self.train_pools.values())
        return max(1, math.ceil(n / self.cfg.batch_size))

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs_total * self.steps_per_epoch

    def lr(self, step: int) -> float:
        warmup = int(self.cfg.warmup_epochs * self.steps_per_epoch)
        return lr_at(step, self.total_steps, warmup, self.cfg.max_lr)

    def _param_groups(self, frozen_vision: bool):
        """(params to update, per-name lr scale, vision grads for clipping)."""
        updates: dict[str, Tensor] = {}
        scales: dict[str, float] = {}
        for name, p in self.params.items():
            is_vision = name.startswith("vision.")
            if is_vision and frozen_vision:
                continue
            updates[name] = p
            scales[name] = (self.cfg.backbone_lr_scale
                            if name.startswith("vision.backbone.") else 1.0)
        return updates, scales

    # -- one step -------------------------------------------------------------

    def _batch_arrays(self, batch: list[TaskSample]):
        images = np.stack([self.dataset.image_array(s.image) for s in batch])
        prompts = [s.prompt for s in batch]
        return images, prompts

    def compute_losses(self, batch: list[TaskSample]):
        """Forward the batch and return (total loss tensor, per-task sums, counts)."""
        images, prompts = self._batch_arrays(batch)
        out = self.model.forward(images, prompts)
        vocab = self.dataset.vocab
        per_task = {t: 0.0 for t in self.cfg.tasks}
        counts = {t: 0 for t in self.cfg.tasks}
        parts = []

        text_idx = [i for i, s in enumerate(batch) if s.target_text is not None]
        if text_idx:
            seqs = [vocab.encode(batch[i].target_text) + [vocab.eos_id] for i in text_idx]
            lmax = max(len(q) for q in seqs)
            ids = np.full((len(seqs), lmax), vocab.pad_id, dtype=np.int64)
            mask = np.zeros((len(seqs), lmax))
            weights = np.zeros(len(seqs))
            for k, (i, q) in enumerate(zip(text_idx, seqs)):
                ids[k, :len(q)] = q
                mask[k, :len(q)] = 1.0
                weights[k] = (self.cfg.caption_loss_weight
                              if batch[i].task == "captioning" else 1.0)
            sub = self._sub_outputs(out, text_idx)
            logits = self.model.teacher_forcing_logits(sub, ids)
            ce = T.cross_entropy_from_logits(logits, ids)
            per_sample = T.sum_(T.mul(ce, mask), axis=1)           # (B_t,)
            per_sample = T.mul(per_sample, weights / mask.sum(axis=1))
            parts.append(T.sum_(per_sample))
            for k, i in enumerate(text_idx):
                per_task[batch[i].task] += float(per_sample.data[k])
                counts[batch[i].task] += 1

        rel_logits = T.add(out["relatedness_logits"], out["objectness_logits"])
        for i, s in enumerate(batch):
            if s.target_boxes is None:
                continue
            box_loss = hungarian_loss(
                T.slice_(out["boxes"], (i,)), T.slice_(rel_logits, (i,)),
                np.asarray(s.target_boxes), self.cfg.coeffs)
            parts.append(box_loss)
            per_task[s.task] += float(box_loss.data)
            counts[s.task] += 1

        total = parts[0]
        for p in parts[1:]:
            total = T.add(total, p)
        total = T.mul(total, 1.0 / len(batch))
        return total, per_task, counts

    def _sub_outputs(self, out: dict, idx: list[int]):
        sel = np.asarray(idx, dtype=np.int64)
        return {
            "memory": T.slice_(out["memory"], (sel,)),
            "memory_mask": out["memory_mask"][sel],
        }

    def train_step(self, batch: list[TaskSample], frozen_vision: bool):
        with Tape() as tape:
            loss, per_task, counts = self.compute_losses(batch)
            if not math.isfinite(float(loss.data)):
                raise NumericError(
                    f"non-finite loss at step {self.global_step}: per-task {per_task}")
            tape.backward(loss)

        updates, scales = self._param_groups(frozen_vision)
        vision_grads = [p.grad for n, p in updates.items()
                        if n.startswith("vision.") and p.grad is not None]
        if vision_grads and self.cfg.grad_clip > 0:
            clip_global_norm(vision_grads, self.cfg.grad_clip)
        base_lr = self.lr(self.global_step + 1)
        with_grads = {n: p for n, p in updates.items() if p.grad is not None}
        for scale in sorted({scales[n] for n in with_grads}):
            group = {n: p for n, p in with_grads.items() if scales[n] == scale}
            adamw_step(group, self.opt, base_lr * scale)
        for p in self.params.values():
            p.zero_grad()
        self.global_step += 1
        return float(loss.data), per_task, counts

    # -- full loop ------------------------------------------------------------

    def train(self, run_dir: str | None = None, log_fn=None):
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
        best_score = -math.inf
        log_path = os.path.join(run_dir, "log.jsonl") if run_dir else None
        for epoch in range(self.start_epoch, self.cfg.epochs_total):
            frozen = (epoch < self.cfg.epochs_frozen) or not self.cfg.finetune_vision
            # frozen vision skips recording its ops, saving backward time
            for name, p in self.params.items():
                if name.startswith("vision."):
                    p.requires_grad = not frozen
            rng = epoch_rng(self.cfg.seed, epoch)
            task_sums = {t: 0.0 for t in self.cfg.tasks}
            task_counts = {t: 0 for t in self.cfg.tasks}
            t0 = time.monotonic()
            for _ in range(self.steps_per_epoch):
                batch = sample_minibatch(self.train_pools, self.cfg.batch_size, rng)
                _, per_task, counts = self.train_step(batch, frozen)
                for t in self.cfg.tasks:
                    task_sums[t] += per_task[t]
                    task_counts[t] += counts[t]
            task_means = {t: task_sums[t] / max(1, task_counts[t]) for t in self.cfg.tasks}
            val_report = self.evaluate("val", limit=self.cfg.eval_samples_per_task)
            val_scores = {r.task: r.score for r in val_report.results}
            record = {
                "epoch": epoch,
                "step": self.global_step,
                "lr": self.lr(self.global_step),
                "frozen_vision": frozen,
                "task_loss": task_means,
                "val_metrics": val_scores,
                "seconds": round(time.monotonic() - t0, 2),
            }
            self.history.append(record)
            if log_fn:
                log_fn(record)
            if log_path:
                with open(log_path, "a") as f:
                    f.write(json.dumps(record) + "\n")
            if run_dir:
                meta = {"epoch": epoch + 1, "step": self.global_step}
                save_checkpoint(os.path.join(run_dir, "last.npz"), self.params,
                                self.opt, meta)
                mean_val = float(np.mean(list(val_scores.values()))) if val_scores else 0.0
                if mean_val >= best_score:
                    best_score = mean_val
                    save_checkpoint(os.path.join(run_dir, "best.npz"), self.params,
                                    self.opt, meta)
        for p in self.params.values():
            p.requires_grad = True
        return self.history

    def resume(self, run_dir: str):
        loaded, opt, meta = load_checkpoint(os.path.join(run_dir, "last.npz"))
        restore_params(self.params, loaded)
        if opt is not None:
            self.opt = opt
        self.start_epoch = int(meta.get("epoch", 0))
        self.global_step = int(meta.get("step", 0))

    # -- evaluation -----------------------------------------------------------

    def _ids_for(self, part: str, task: str, limit: int | None):
        if part in ("train", "val"):
            pool = self.train_pools if part == "train" else self.val_pools
            ids = [s.id for s in pool.get(task, [])]
        else:
            ids = self.split.ids_for(part, task)
        if limit:
            ids = ids[:limit]
        return ids

    def evaluate(self, part: str, limit: int | None = None,
                 tasks: tuple | None = None) -> MetricReport:
        report = MetricReport()
        unseen_lookup = {t: set(self.split.test_unseen.get(t, [])) for t in TASKS}
        for task in (tasks or self.cfg.tasks):
            ids = self._ids_for(part, task, limit)
            if not ids:
                continue
            samples = [self.dataset.by_id[i] for i in ids]
            scores, extra = self._score_task(task, samples)
            if part in ("test", "test_seen", "test_unseen"):
                seen_vals = [v for s, v in zip(samples, scores)
                             if s.id not in unseen_lookup[task]]
                unseen_vals = [v for s, v in zip(samples, scores)
                               if s.id in unseen_lookup[task]]
                report.results.append(TaskScore(
                    task=task, split=part,
                    score=_agg(task, scores, extra, samples),
                    n=len(samples),
                    seen_score=_agg(task, seen_vals, extra,
                                    [s for s in samples if s.id not in unseen_lookup[task]])
                    if seen_vals else None,
                    unseen_score=_agg(task, unseen_vals, extra,
                                      [s for s in samples if s.id in unseen_lookup[task]])
                    if unseen_vals else None,
                    n_seen=len(seen_vals), n_unseen=len(unseen_vals)))
            else:
                report.results.append(TaskScore(
                    task=task, split=part, score=_agg(task, scores, extra, samples),
                    n=len(samples)))
        return report

    def _score_task(self, task: str, samples: list[TaskSample]):
        """Per-sample scores via the shared forward pass (same entry point
        for every task)."""
        scores: list[float] = []
        texts: dict[str, str] = {}
        for chunk_start in range(0, len(samples), self.cfg.eval_batch):
            chunk = samples[chunk_start:chunk_start + self.cfg.eval_batch]
            images, prompts = self._batch_arrays(chunk)
            out = self.forward_for_eval(images, prompts, task)
            if task in ("localization", "refexp"):
                boxes = out["boxes"].data
                rel = out["relevance"].data
                for k, s in enumerate(chunk):
                    order = np.argsort(-rel[k], kind="stable")
                    ranked = boxes[k][order]
                    if task == "localization":
                        scores.append(localization_ap(ranked, s.target_boxes))
                    else:
                        scores.append(float(refexp_accuracy(ranked[0], s.target_boxes[0])))
            elif task == "classification":
                labels = list(self.dataset.config.shapes)
                per_label = {}
                for label in labels:
                    per_label[label] = self.model.score_text(out, [label] * len(chunk))
                for k, s in enumerate(chunk):
                    pred = classify_with_suppression(
                        lambda lab: per_label[lab][k], labels)
                    scores.append(float(pred == s.target_text))
            elif task == "vqa":
                gen = self.model.generate(out)
                for k, s in enumerate(chunk):
                    pred = self.dataset.vocab.decode(gen[k])
                    scores.append(vqa_accuracy(pred, s.annotator_answers or []))
            elif task == "captioning":
                gen = self.model.generate(out)
                for k, s in enumerate(chunk):
                    texts[s.id] = self.dataset.vocab.decode(gen[k])
                    scores.append(0.0)  # replaced by the corpus score in _agg
            else:
                raise ValueError(f"no metric registered for task {task!r}")
        if task == "captioning":
            return scores, {"generated": texts}
        return scores, {}

    def forward_for_eval(self, images, prompts, task: str):
        """Single entry point for every task family (asserted by tests)."""
        return self.model.forward(images, prompts)

    def caption_references(self, image_id: str) -> list[str]:
        return [s.target_text for s in self.dataset.samples["captioning"]
                if s.image == image_id]

    # -- learning curves ------------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data = arrays[k].copy()

    def finetune_refexp(self, n_samples: int, steps: int, lr: float,
                        batch_size: int = 8, seed: int = 0):
        """Finetune (in place) on n referring-expression samples; fresh
        optimizer state."""
        pool = [self.dataset.by_id[i] for i in self.split.train
                if self.dataset.by_id[i].task == "refexp"]
        if n_samples > len(pool):
            raise ValueError(f"requested {n_samples} refexp samples, have {len(pool)}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
        chosen = [pool[i] for i in rng.permutation(len(pool))[:n_samples]]
        opt = OptimizerState(weight_decay=self.cfg.weight_decay)
        for step in range(steps):
            batch = [chosen[int(rng.integers(len(chosen)))]
                     for _ in range(min(batch_size, len(chosen)))]
            with Tape() as tape:
                loss, _, _ = self.compute_losses(batch)
                if not math.isfinite(float(loss.data)):
                    raise NumericError(f"non-finite finetune loss at step {step}")
                tape.backward(loss)
            with_grads = {n: p for n, p in self.params.items() if p.grad is not None}
            vision_grads = [p.grad for n, p in with_grads.items()
                            if n.startswith("vision.")]
            if vision_grads and self.cfg.grad_clip > 0:
                clip_global_norm(vision_grads, self.cfg.grad_clip)
            adamw_step(with_grads, opt, lr)
            for p in self.params.values():
                p.zero_grad()

    def learning_curve(self, sizes, finetune_steps: int = 60, finetune_lr: float = 1e-4,
                       eval_limit: int | None = 100, eval_part: str = "test_seen",
                       seed: int = 0) -> list[LearningCurvePoint]:
        """For each n (0 included): finetune a fresh copy on n refexp samples,
        then measure refexp accuracy and per-original-task retention."""
        sizes = sorted(set(int(n) for n in sizes))
        base = self.snapshot()
        pre = {r.task: r.score
               for r in self.evaluate(eval_part, limit=eval_limit).results}
        points = []
        for n in sizes:
            self.restore(base)
            if n > 0:
                self.finetune_refexp(n, steps=finetune_steps, lr=finetune_lr, seed=seed)
            ref = self.evaluate(eval_part, limit=eval_limit, tasks=("refexp",))
            ref_acc = ref.results[0].score if ref.results else 0.0
            post = {r.task: r.score
                    for r in self.evaluate(eval_part, limit=eval_limit).results}
            retention = {}
            for t in self.cfg.tasks:
                if t == "refexp":
                    continue
                if pre.get(t, 0.0) == 0.0:
                    retention[t] = 1.0 if post.get(t, 0.0) == 0.0 else float("inf")
                else:
                    retention[t] = post[t] / pre[t]
            points.append(LearningCurvePoint(n_finetune_samples=n,
                                             refexp_accuracy=ref_acc,
                                             retention=retention))
        self.restore(base)
        return points


def _agg(task: str, scores, extra, samples):
    """Mean score; captioning is scored as a corpus metric instead."""
    if task != "captioning":
        return float(np.mean(scores)) if scores else 0.0
    texts = extra["generated"]
    # one candidate per image; references are that image's annotated captions
    by_image: dict[str, str] = {}
    refs: dict[str, list[str]] = {}
    for s in samples:
        if s.id in texts and s.image not in by_image:
            by_image[s.image] = texts[s.id]
    for s in samples:
        refs.setdefault(s.image, [])
        if s.target_text:
            refs[s.image].append(s.target_text)
    refs = {img: rs for img, rs in refs.items() if img in by_image}
    if len(by_image) < 2:
        return 0.0
    mean, _ = cider_d(by_image, refs)
    return mean
