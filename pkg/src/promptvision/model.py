"""The full prompt-driven pipeline: image + task description in; boxes,
relevance scores, and text out. One forward path for every task; nothing
in the signature or the code inspects a task label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .crossmodal import CrossModalConfig, CrossModalModule, memory_mask_from_token_mask
from .language import (
    LanguageConfig,
    TaskEncoder,
    TextDecoder,
    Vocabulary,
    greedy_generate,
)
from .tensor import Tensor, TensorError
from .vision import VisionConfig, VisionModule


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    language: LanguageConfig = field(default_factory=LanguageConfig)
    crossmodal: CrossModalConfig = field(default_factory=CrossModalConfig)
    seed: int = 0


class PromptModel(nn.Module):
    """Task-agnostic model; construction depends only on dims and vocab size."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        self.cfg = cfg
        self.vocab = vocab
        self.vision = VisionModule(rng, cfg.vision)
        self.language_encoder = TaskEncoder(rng, len(vocab), cfg.language)
        self.crossmodal = CrossModalModule(
            rng, cfg.vision.d_region, cfg.language.d_model, cfg.crossmodal)
        self.text_decoder = TextDecoder(rng, len(vocab), cfg.language)

    # -- batched forward ----------------------------------------------------

    def encode_prompts(self, prompts: list[str]):
        """Tokenize and pad a list of prompts -> (ids (B,T), lengths)."""
        seqs = [self.vocab.encode(p) for p in prompts]
        if any(len(s) == 0 for s in seqs):
            raise TensorError("forward: empty prompt")
        lengths = [len(s) for s in seqs]
        t = max(lengths)
        ids = np.full((len(seqs), t), self.vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        return ids, lengths

    def forward(self, images: np.ndarray, prompts: list[str]):
        """images: (B, H, W, 3) floats in [0,1]; prompts: B strings.

        Returns a dict with boxes (B,R,4), relevance (B,R), relatedness /
        objectness logits, memory and its mask, prompt lengths.
        """
        if images.ndim != 4 or images.shape[0] != len(prompts):
            raise TensorError(
                f"forward: images {images.shape} do not match {len(prompts)} prompts")
        x = Tensor(np.transpose(images, (0, 3, 1, 2)))
        vis = self.vision(x)
        ids, lengths = self.encode_prompts(prompts)
        tokens = self.language_encoder(ids, lengths)
        token_mask = nn.padding_mask(lengths, ids.shape[1])
        memory, relevance, relatedness, _ = self.crossmodal(
            vis["descriptors"], tokens, vis["objectness"], token_mask)
        memory_mask = memory_mask_from_token_mask(
            self.cfg.vision.num_queries, lengths, ids.shape[1])
        return {
            "boxes": vis["boxes"],
            "relevance": relevance,
            "relatedness_logits": relatedness,
            "objectness_logits": vis["objectness"],
            "memory": memory,
            "memory_mask": memory_mask,
            "prompt_lengths": lengths,
        }

    def teacher_forcing_logits(self, out: dict, target_ids: np.ndarray):
        """Logits (B, L, V) for prefix [BOS, y_0..y_{L-2}] at each position."""
        b, l = target_ids.shape
        prefix = np.concatenate(
            [np.full((b, 1), self.vocab.bos_id, dtype=np.int64), target_ids[:, :-1]],
            axis=1)
        return self.text_decoder.step_logits(
            prefix, out["memory"], self.language_encoder.embed.table,
            memory_mask=out["memory_mask"])

    def generate(self, out: dict):
        """Greedy text for each batch element -> list of token-id lists."""
        return greedy_generate(
            self.text_decoder, out["memory"], self.language_encoder.embed.table,
            self.vocab, memory_mask=out["memory_mask"])

    def score_text(self, out: dict, texts: list[str]):
        """Teacher-forced total log-likelihood and token count per element.

        Each text is scored against the corresponding batch row of `out`.
        """
        ids_list = [self.vocab.encode(t) + [self.vocab.eos_id] for t in texts]
        l = max(len(s) for s in ids_list)
        b = len(ids_list)
        ids = np.full((b, l), self.vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(ids_list):
            ids[i, :len(s)] = s
        logits = self.teacher_forcing_logits(out, ids)
        ce = T.cross_entropy_from_logits(logits, ids)  # (B, L)
        results = []
        for i, s in enumerate(ids_list):
            results.append((-float(ce.data[i, :len(s)].sum()), len(s)))
        return results

    def parameters(self):
        # stable top-level namespaces for the checkpoint format
        out: dict[str, Tensor] = {}
        self.vision._collect("vision.", out)
        self.language_encoder._collect("language_encoder.", out)
        self.crossmodal._collect("crossmodal.", out)
        self.text_decoder._collect("text_decoder.", out)
        return out


BOX_TASKS = ("localization", "refexp")
TEXT_TASKS = ("vqa", "captioning", "classification")


class HeadPerTaskModel(PromptModel):
    """Comparison harness: the task-specific-heads anti-pattern.

    Shares the full trunk (backbone, vision transformer, language encoder,
    co-attention) but instantiates one box/objectness head per
    box-supervised task and one text decoder per text task. Unlike the
    main model, its forward must be told which task's heads to use.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, tasks):
        super().__init__(cfg, vocab)
        from .vision import BoxHead, ObjectnessHead
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))
        self.task_list = tuple(tasks)
        self.box_heads = {t: BoxHead(rng, cfg.vision.d_model)
                          for t in self.task_list if t in BOX_TASKS}
        self.objectness_heads = {t: ObjectnessHead(rng, cfg.vision.d_model)
                                 for t in self.task_list if t in BOX_TASKS}
        self.text_decoders = {t: TextDecoder(rng, len(vocab), cfg.language)
                              for t in self.task_list if t in TEXT_TASKS}

    def forward(self, images: np.ndarray, prompts: list[str], task: str | None = None):
        if task is None:
            raise TensorError("HeadPerTaskModel.forward requires a task")
        from .vision import roi_pool
        x = Tensor(np.transpose(images, (0, 3, 1, 2)))
        fmap = self.vision.backbone(x)
        dec = self.vision.encdec(fmap)
        box_head = self.box_heads.get(task, self.vision.box_head)
        obj_head = self.objectness_heads.get(task, self.vision.objectness_head)
        boxes = box_head(dec)
        objectness = obj_head(dec)
        if self.cfg.vision.use_roi_features:
            pooled = roi_pool(fmap, boxes, self.cfg.vision.roi_pool_size)
            descriptors = T.concat([dec, pooled], axis=2)
        else:
            descriptors = dec
        ids, lengths = self.encode_prompts(prompts)
        tokens = self.language_encoder(ids, lengths)
        token_mask = nn.padding_mask(lengths, ids.shape[1])
        memory, relevance, relatedness, _ = self.crossmodal(
            descriptors, tokens, objectness, token_mask)
        memory_mask = memory_mask_from_token_mask(
            self.cfg.vision.num_queries, lengths, ids.shape[1])
        return {
            "boxes": boxes,
            "relevance": relevance,
            "relatedness_logits": relatedness,
            "objectness_logits": objectness,
            "memory": memory,
            "memory_mask": memory_mask,
            "prompt_lengths": lengths,
            "task": task,
        }

    def teacher_forcing_logits(self, out: dict, target_ids: np.ndarray):
        decoder = self.text_decoders.get(out.get("task"), self.text_decoder)
        b, l = target_ids.shape
        prefix = np.concatenate(
            [np.full((b, 1), self.vocab.bos_id, dtype=np.int64), target_ids[:, :-1]],
            axis=1)
        return decoder.step_logits(
            prefix, out["memory"], self.language_encoder.embed.table,
            memory_mask=out["memory_mask"])

    def generate(self, out: dict):
        decoder = self.text_decoders.get(out.get("task"), self.text_decoder)
        return greedy_generate(
            decoder, out["memory"], self.language_encoder.embed.table,
            self.vocab, memory_mask=out["memory_mask"])

    def parameters(self):
        out = super().parameters()
        for name, heads in (("box_heads", self.box_heads),
                            ("objectness_heads", self.objectness_heads),
                            ("text_decoders", self.text_decoders)):
            for task, mod in heads.items():
                mod._collect(f"per_task.{name}.{task}.", out)
        return out


def gpv_forward(model: PromptModel, image: np.ndarray, prompt: str):
    """Single-sample task-agnostic inference.

    Returns boxes (R,4), relevance (R,), generated text, and a
    teacher-forcing callable mapping target ids -> per-step logits.
    All three output modalities are always produced.
    """
    if not prompt or not prompt.strip():
        raise TensorError("gpv_forward: prompt must be nonempty")
    out = model.forward(image[None], [prompt])
    token_ids = model.generate(out)[0]
    text = model.vocab.decode(token_ids)

    def text_logits(target_ids):
        ids = np.asarray(target_ids, dtype=np.int64)[None]
        return model.teacher_forcing_logits(out, ids)

    return {
        "boxes": out["boxes"].data[0],
        "relevance": out["relevance"].data[0],
        "text": text,
        "text_token_ids": token_ids,
        "text_logits": text_logits,
        "raw": out,
    }
