"""Dataset assembly and on-disk layout.

Disk format under a dataset directory:

    images/<id>.png          scenes and classification crops (RGB)
    annotations.jsonl        one record per scene: objects + crop specs
    samples.jsonl            one record per task sample
    vocab.txt                one token per line, specials first
    manifest.json            config echo, seed, counts, content hash

Pixels are quantized to 8 bits at generation time so in-memory and
disk-loaded datasets are identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .language import Vocabulary
from .shapes import (
    Scene,
    SceneObject,
    ShapeWorldConfig,
    crop_to_canvas,
    generate_scenes,
)
from .taskgen import (
    TASKS,
    CropSpec,
    TaskSample,
    build_task_samples,
    build_vocabulary_tokens,
)

CROP_CANVAS_FILL = 0.35


@dataclass
class Dataset:
    config: ShapeWorldConfig
    scenes: dict[str, Scene]                 # image id -> scene (uint8 pixels/255)
    pools: dict[str, list[str]]              # train/val/test -> image ids
    samples: dict[str, list[TaskSample]]     # task -> samples
    crops: dict[str, CropSpec]               # crop id -> spec
    vocab: Vocabulary
    _pixel_cache: dict = field(default_factory=dict, repr=False)

    @property
    def by_id(self) -> dict[str, TaskSample]:
        if not hasattr(self, "_by_id"):
            self._by_id = {s.id: s for task in TASKS for s in self.samples[task]}
        return self._by_id

    def image_array(self, image_id: str) -> np.ndarray:
        """(H, W, 3) float64 in [0,1]; crops rendered on demand."""
        if image_id in self._pixel_cache:
            return self._pixel_cache[image_id]
        if image_id in self.scenes:
            arr = self.scenes[image_id].pixels
        elif image_id in self.crops:
            spec = self.crops[image_id]
            src = self.image_array(spec.source_image)
            arr = quantize(crop_to_canvas(src, spec.box, self.config.image_size,
                                          fill=CROP_CANVAS_FILL))
        else:
            raise KeyError(f"unknown image id {image_id!r}")
        self._pixel_cache[image_id] = arr
        return arr


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255.0) / 255.0


def generate_dataset(config: ShapeWorldConfig, seed: int | None = None) -> Dataset:
    seed = config.seed if seed is None else seed
    pools_scenes = generate_scenes(config, seed)
    scenes: dict[str, Scene] = {}
    pools: dict[str, list[str]] = {}
    for pool, scene_list in pools_scenes.items():
        pools[pool] = [s.image_id for s in scene_list]
        for s in scene_list:
            s.pixels = quantize(s.pixels)
            scenes[s.image_id] = s

    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    all_scenes = [scenes[i] for pool in ("train", "val", "test") for i in pools[pool]]
    samples, crop_list = build_task_samples(
        all_scenes, rng, colors=config.colors, shapes=config.shapes)
    crops = {c.crop_id: c for c in crop_list}
    vocab = Vocabulary(build_vocabulary_tokens(samples, config.shapes, config.colors))
    return Dataset(config=config, scenes=scenes, pools=pools, samples=samples,
                   crops=crops, vocab=vocab)


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def _png_bytes(pixels01: np.ndarray) -> bytes:
    img = Image.fromarray(np.round(pixels01 * 255.0).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _sample_record(s: TaskSample) -> dict:
    rec = {"id": s.id, "image": s.image, "task": s.task, "prompt": s.prompt,
           "concept": s.concept}
    if s.target_text is not None:
        rec["target_text"] = s.target_text
    if s.target_boxes is not None:
        rec["target_boxes"] = s.target_boxes
    if s.annotator_answers is not None:
        rec["annotator_answers"] = s.annotator_answers
    return rec


def save_dataset(ds: Dataset, out_dir: str):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    hasher = hashlib.sha256()

    image_ids = sorted(ds.scenes) + sorted(ds.crops)
    for image_id in image_ids:
        png = _png_bytes(ds.image_array(image_id))
        hasher.update(image_id.encode())
        hasher.update(png)
        with open(os.path.join(out_dir, "images", _fname(image_id)), "wb") as f:
            f.write(png)

    crops_by_source: dict[str, list[CropSpec]] = {}
    for c in ds.crops.values():
        crops_by_source.setdefault(c.source_image, []).append(c)

    with open(os.path.join(out_dir, "annotations.jsonl"), "w") as f:
        for image_id in sorted(ds.scenes):
            scene = ds.scenes[image_id]
            rec = {
                "image": image_id,
                "pool": image_id.split("_")[0],
                "objects": [{"shape": o.shape, "color": o.color, "box": list(o.box)}
                            for o in scene.objects],
                "crops": [{"crop_id": c.crop_id, "box": list(c.box)}
                          for c in crops_by_source.get(image_id, [])],
            }
            line = json.dumps(rec, sort_keys=True)
            hasher.update(line.encode())
            f.write(line + "\n")

    n_samples = {}
    with open(os.path.join(out_dir, "samples.jsonl"), "w") as f:
        for task in TASKS:
            for s in ds.samples[task]:
                line = json.dumps(_sample_record(s), sort_keys=True)
                hasher.update(line.encode())
                f.write(line + "\n")
            n_samples[task] = len(ds.samples[task])

    ds.vocab.save(os.path.join(out_dir, "vocab.txt"))
    hasher.update("\n".join(ds.vocab.tokens).encode())

    manifest = {
        "config": asdict(ds.config),
        "seed": ds.config.seed,
        "images": {pool: len(ids) for pool, ids in ds.pools.items()},
        "crops": len(ds.crops),
        "samples": n_samples,
        "content_hash": hasher.hexdigest(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _fname(image_id: str) -> str:
    return image_id.replace(":", "__") + ".png"


def load_dataset(data_dir: str) -> Dataset:
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    cfg_d = dict(manifest["config"])
    cfg_d["shapes"] = tuple(cfg_d["shapes"])
    cfg_d["colors"] = tuple(cfg_d["colors"])
    config = ShapeWorldConfig(**cfg_d)

    scenes: dict[str, Scene] = {}
    pools: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    crops: dict[str, CropSpec] = {}
    with open(os.path.join(data_dir, "annotations.jsonl")) as f:
        for line in f:
            rec = json.loads(line)
            image_id = rec["image"]
            pixels = _load_png(os.path.join(data_dir, "images", _fname(image_id)))
            scene = Scene(image_id=image_id, pixels=pixels,
                          objects=[SceneObject(shape=o["shape"], color=o["color"],
                                               box=tuple(o["box"]))
                                   for o in rec["objects"]])
            scenes[image_id] = scene
            pools[rec["pool"]].append(image_id)
            for c in rec["crops"]:
                crops[c["crop_id"]] = CropSpec(crop_id=c["crop_id"],
                                               source_image=image_id,
                                               box=tuple(c["box"]))

    samples: dict[str, list[TaskSample]] = {t: [] for t in TASKS}
    with open(os.path.join(data_dir, "samples.jsonl")) as f:
        for line in f:
            rec = json.loads(line)
            samples[rec["task"]].append(TaskSample(
                id=rec["id"], image=rec["image"], task=rec["task"],
                prompt=rec["prompt"], concept=rec["concept"],
                target_text=rec.get("target_text"),
                target_boxes=rec.get("target_boxes"),
                annotator_answers=rec.get("annotator_answers"),
            ))

    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
    return Dataset(config=config, scenes=scenes, pools=pools, samples=samples,
                   crops=crops, vocab=vocab)


def _load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
