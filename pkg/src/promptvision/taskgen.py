"""Task-sample construction from rendered scenes.

Five sample kinds share one record type: localization and referring
expressions carry box targets, the rest carry text targets. Prompts are
drawn from fixed template lists; referring expressions are validated by
a rule-based resolver before a sample is emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .shapes import Scene, plural

TASKS = ("vqa", "captioning", "localization", "classification", "refexp")

CAPTION_PROMPTS = [
    "Generate a caption.",
    "Generate a description.",
    "Describe this image.",
    "Describe the image.",
    "Caption this image.",
    "Caption the image.",
    "What is happening in this image?",
    "What is happening in the image?",
    "What is going on in this image?",
    "What is going on in the image?",
    "Generate a caption for this image.",
    "Generate a caption for the image.",
    "Generate a description for this image.",
]

CLASSIFICATION_PROMPTS = [
    "What is this?",
    "What is this object?",
    "What object is this?",
    "What is this thing?",
]

LOCALIZATION_PROMPTS = [
    "Locate [OBJECT].",
    "Locate [OBJECT] in the image.",
    "Locate [OBJECT] in this image.",
    "Locate instances of [OBJECT].",
    "Locate instances of [OBJECT] in the image.",
    "Locate instances of [OBJECT] in this image.",
    "Locate all instances of [OBJECT].",
    "Locate all instances of [OBJECT] in the image.",
    "Locate all instances of [OBJECT] in this image.",
    "Find [OBJECT].",
    "Find [OBJECT] in the image.",
    "Find [OBJECT] in this image.",
    "Find instances of [OBJECT].",
    "Find instances of [OBJECT] in the image.",
    "Find instances of [OBJECT] in this image.",
    "Find all instances of [OBJECT].",
    "Find all instances of [OBJECT] in the image.",
    "Find all instances of [OBJECT] in this image.",
]

COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five"}
RELATIONS = ("left of", "right of", "above", "below")


@dataclass
class TaskSample:
    id: str
    image: str          # image id; classification points at a crop image
    task: str
    prompt: str
    concept: str
    target_text: str | None = None
    target_boxes: list | None = None
    annotator_answers: list | None = None


@dataclass
class CropSpec:
    crop_id: str
    source_image: str
    box: tuple  # normalized cxcywh in the source image


def _group_objects(scene: Scene):
    by_concept: dict[str, list[int]] = {}
    for i, obj in enumerate(scene.objects):
        by_concept.setdefault(obj.shape, []).append(i)
    return by_concept


def _caption_text(scene: Scene, order):
    groups: dict[tuple, int] = {}
    for obj in scene.objects:
        key = (obj.color, obj.shape)
        groups[key] = groups.get(key, 0) + 1
    keys = list(groups)
    keys = [keys[i] for i in order] if order is not None else keys
    phrases = []
    for color, shape in keys:
        n = groups[(color, shape)]
        if n == 1:
            phrases.append(f"a {color} {shape}")
        else:
            phrases.append(f"{COUNT_WORDS[n]} {color} {plural(shape)}")
    return " and ".join(phrases)


def resolve_refexp(expression: str, scene: Scene, colors, shapes):
    """Rule-based resolver: returns indices of objects the expression
    picks out, or None if it does not parse.

    Grammar: "the [COLOR] SHAPE" | "the SHAPE REL the [COLOR] SHAPE"
    with REL in left of / right of / above / below.
    """
    words = expression.lower().replace("?", "").replace(".", "").split()
    colors, shapes = set(colors), set(shapes)

    def parse_np(tokens):
        # "the [color] shape" -> (color or None, shape, tokens consumed)
        if not tokens or tokens[0] != "the":
            return None
        if len(tokens) >= 3 and tokens[1] in colors and tokens[2] in shapes:
            return tokens[1], tokens[2], 3
        if len(tokens) >= 2 and tokens[1] in shapes:
            return None, tokens[1], 2
        return None

    head = parse_np(words)
    if head is None:
        return None
    color, shape, used = head
    rest = words[used:]

    def matches(obj, color, shape):
        return obj.shape == shape and (color is None or obj.color == color)

    candidates = [i for i, o in enumerate(scene.objects) if matches(o, color, shape)]
    if not rest:
        return candidates

    rel = None
    for r in RELATIONS:
        r_words = r.split()
        if rest[:len(r_words)] == r_words:
            rel = r
            rest = rest[len(r_words):]
            break
    if rel is None:
        return None
    ref = parse_np(rest)
    if ref is None:
        return None
    ref_color, ref_shape, _ = ref
    ref_candidates = [i for i, o in enumerate(scene.objects) if matches(o, ref_color, ref_shape)]
    if len(ref_candidates) != 1:
        return None
    ref_obj = scene.objects[ref_candidates[0]]

    def satisfies(obj):
        if rel == "left of":
            return obj.box[0] < ref_obj.box[0]
        if rel == "right of":
            return obj.box[0] > ref_obj.box[0]
        if rel == "above":
            return obj.box[1] < ref_obj.box[1]
        return obj.box[1] > ref_obj.box[1]

    return [i for i in candidates if satisfies(scene.objects[i]) and i not in ref_candidates]


def _make_refexp(scene: Scene, rng, colors, shapes):
    by_concept = _group_objects(scene)
    indices = list(range(len(scene.objects)))
    # prefer targets that actually need disambiguation
    indices.sort(key=lambda i: -len(by_concept[scene.objects[i].shape]))
    for i in indices:
        obj = scene.objects[i]
        attempts = [f"the {obj.color} {obj.shape}"]
        refs = [j for j in range(len(scene.objects))
                if j != i and len(by_concept[scene.objects[j].shape]) == 1]
        rng.shuffle(refs)
        for j in refs:
            ref = scene.objects[j]
            for rel in RELATIONS:
                attempts.append(f"the {obj.shape} {rel} the {ref.shape}")
        for expr in attempts:
            resolved = resolve_refexp(expr, scene, colors, shapes)
            if resolved == [i]:
                return expr, obj
    return None


def build_task_samples(scenes: list[Scene], rng: np.random.Generator,
                       colors, shapes):
    """Returns (samples per task, crop specs for classification)."""
    samples: dict[str, list[TaskSample]] = {t: [] for t in TASKS}
    crops: list[CropSpec] = []

    for scene in scenes:
        img = scene.image_id
        by_concept = _group_objects(scene)
        present = sorted(by_concept)

        # localization: one sample per present concept, all instances targeted
        for concept in present:
            prompt = LOCALIZATION_PROMPTS[rng.integers(len(LOCALIZATION_PROMPTS))]
            samples["localization"].append(TaskSample(
                id=f"{img}:loc:{concept}",
                image=img, task="localization",
                prompt=prompt.replace("[OBJECT]", concept),
                concept=concept,
                target_boxes=[list(scene.objects[i].box) for i in by_concept[concept]],
            ))

        # classification: one cropped instance per present concept
        for concept in present:
            idx = int(rng.choice(by_concept[concept]))
            crop_id = f"{img}:crop:{concept}"
            crops.append(CropSpec(crop_id=crop_id, source_image=img,
                                  box=scene.objects[idx].box))
            samples["classification"].append(TaskSample(
                id=f"{img}:cls:{concept}",
                image=crop_id, task="classification",
                prompt=CLASSIFICATION_PROMPTS[rng.integers(len(CLASSIFICATION_PROMPTS))],
                concept=concept,
                target_text=concept,
            ))

        # captioning: two templated captions with shuffled group order
        groups = {(o.color, o.shape) for o in scene.objects}
        for k in range(2):
            order = rng.permutation(len(groups))
            samples["captioning"].append(TaskSample(
                id=f"{img}:cap:{k}",
                image=img, task="captioning",
                prompt=CAPTION_PROMPTS[rng.integers(len(CAPTION_PROMPTS))],
                concept="",
                target_text=_caption_text(scene, order),
            ))

        # vqa: color (unique instance), count, existence
        single = [c for c in present if len(by_concept[c]) == 1]
        if single:
            concept = str(rng.choice(single))
            answer = scene.objects[by_concept[concept][0]].color
            samples["vqa"].append(TaskSample(
                id=f"{img}:vqa:color",
                image=img, task="vqa",
                prompt=f"what color is the {concept}?",
                concept=concept,
                target_text=answer,
                annotator_answers=[answer] * 10,
            ))
        concept = str(rng.choice(present))
        count = str(len(by_concept[concept]))
        samples["vqa"].append(TaskSample(
            id=f"{img}:vqa:count",
            image=img, task="vqa",
            prompt=f"how many {plural(concept)} are there?",
            concept=concept,
            target_text=count,
            annotator_answers=[count] * 10,
        ))
        absent = [s for s in shapes if s not in by_concept]
        if absent and rng.random() < 0.5:
            concept, answer = str(rng.choice(absent)), "no"
        else:
            concept, answer = str(rng.choice(present)), "yes"
        samples["vqa"].append(TaskSample(
            id=f"{img}:vqa:exist",
            image=img, task="vqa",
            prompt=f"is there a {concept}?",
            concept=concept,
            target_text=answer,
            annotator_answers=[answer] * 10,
        ))

        # referring expression: one resolver-validated sample when possible
        made = _make_refexp(scene, rng, colors, shapes)
        if made is not None:
            expr, obj = made
            samples["refexp"].append(TaskSample(
                id=f"{img}:ref",
                image=img, task="refexp",
                prompt=expr,
                concept=obj.shape,
                target_boxes=[list(obj.box)],
            ))

    return samples, crops


def build_vocabulary_tokens(samples_by_task: dict[str, list[TaskSample]],
                            shapes, colors):
    """All words appearing in prompts/targets plus concept forms; sorted."""
    from .language import word_tokens

    words = set()
    for task_samples in samples_by_task.values():
        for s in task_samples:
            words.update(word_tokens(s.prompt))
            if s.target_text:
                words.update(word_tokens(s.target_text))
    for s in shapes:
        words.add(s)
        words.add(plural(s))
    words.update(colors)
    return sorted(words)
