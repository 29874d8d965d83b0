"""Corpus records, JSON-lines I/O and the synthetic world generator."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .batching import Region, make_rng
from .errors import DataError, VivoIOError
from .tokenizer import CONTINUATION, Vocabulary, normalize


@dataclass(frozen=True)
class RegionRecord:
    appearance: tuple[float, ...]
    box: tuple[float, float, float, float]  # pixel corners x1, y1, x2, y2
    label: str | None = None


@dataclass(frozen=True)
class ImageTagRecord:
    id: str
    tags: tuple[str, ...]
    regions: tuple[RegionRecord, ...]
    image_size: tuple[float, float]
    caption: str | None = None

    def region_objects(self) -> list[Region]:
        return [Region.from_pixels(r.appearance, r.box, self.image_size) for r in self.regions]

    def to_json(self) -> dict:
        out = {"id": self.id, "tags": list(self.tags)}
        if self.caption is not None:
            out["caption"] = self.caption
        out["image_size"] = list(self.image_size)
        regions = []
        for r in self.regions:
            item = {"appearance": list(r.appearance), "box": list(r.box)}
            if r.label is not None:
                item["label"] = r.label
            regions.append(item)
        out["regions"] = regions
        return out


# A caption record is a tag record whose ``caption`` is set.
ImageCaptionRecord = ImageTagRecord


def parse_record(raw, index: int, need_caption: bool = False, d_app: int | None = None) -> ImageTagRecord:
    if not isinstance(raw, dict):
        raise DataError("record must be a JSON object", index)
    try:
        rid = str(raw["id"])
        tags = raw["tags"]
        regions_raw = raw.get("regions", [])
        width, height = raw["image_size"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"missing or malformed field: {exc}", index) from exc
    if not isinstance(tags, list) or not tags or not all(isinstance(t, str) and normalize(t) for t in tags):
        raise DataError("tags must be a non-empty list of non-empty strings", index)
    try:
        width, height = float(width), float(height)
    except (TypeError, ValueError) as exc:
        raise DataError("image_size must be two numbers", index) from exc
    if not (width > 0 and height > 0):
        raise DataError(f"image_size must be positive, got {[width, height]}", index)
    if not isinstance(regions_raw, list):
        raise DataError("regions must be a list", index)
    regions = []
    lengths = set()
    for k, r in enumerate(regions_raw):
        try:
            app = tuple(float(v) for v in r["appearance"])
            box = tuple(float(v) for v in r["box"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"region {k}: malformed appearance/box", index) from exc
        if len(box) != 4:
            raise DataError(f"region {k}: box needs 4 pixel coordinates", index)
        x1, y1, x2, y2 = box
        if not (0 <= x1 <= x2 <= width and 0 <= y1 <= y2 <= height):
            raise DataError(f"region {k}: box {list(box)} is outside the {width:g}x{height:g} image", index)
        if not all(math.isfinite(v) for v in app):
            raise DataError(f"region {k}: appearance has non-finite values", index)
        lengths.add(len(app))
        label = r.get("label")
        regions.append(RegionRecord(app, box, None if label is None else str(label)))
    if len(lengths) > 1:
        raise DataError(f"appearance lengths differ within the record: {sorted(lengths)}", index)
    if d_app is not None and lengths and lengths != {d_app}:
        raise DataError(f"appearance length {lengths.pop()} != d_app {d_app}", index)
    caption = raw.get("caption")
    if caption is not None and (not isinstance(caption, str) or not normalize(caption)):
        raise DataError("caption must be a non-empty string", index)
    if need_caption and caption is None:
        raise DataError("caption is required", index)
    return ImageTagRecord(rid, tuple(tags), tuple(regions), (width, height), caption)


def read_records(path: str, need_caption: bool = False, d_app: int | None = None) -> list[ImageTagRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except FileNotFoundError as exc:
        raise VivoIOError(f"corpus file not found: {path}") from exc
    except OSError as exc:
        raise VivoIOError(f"cannot read corpus {path}: {exc.strerror}") from exc
    records = []
    for line in lines:
        if not line.strip():
            continue
        index = len(records)
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON: {exc.msg}", index) from exc
        records.append(parse_record(raw, index, need_caption, d_app))
    return records


def dumps_line(obj) -> str:
    return json.dumps(obj, sort_keys=False, separators=(",", ":"))


def write_lines(path: str, objs: Iterable) -> None:
    """Write one JSON object per line, atomically."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for obj in objs:
                fh.write(dumps_line(obj) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise VivoIOError(f"cannot write {path}: {exc.strerror}") from exc


def write_records(path: str, records: Sequence[ImageTagRecord]) -> None:
    write_lines(path, (r.to_json() for r in records))


# ---------------------------------------------------------------- synthetic world

OBJECT_WORDS = (
    "dog", "cat", "car", "tree", "boat", "chair", "bird", "horse", "cup", "lamp",
    "clock", "kite", "bench", "bottle", "sheep", "train", "apple", "drum",
)
# these are tokenised into two pieces to exercise multi-token tags
SPLIT_WORDS = {"accordion": ("accord", "ion"), "beehive": ("bee", "hive"), "cabbage": ("cab", "bage"),
               "teapot": ("tea", "pot")}

CAPTION_TEMPLATES_1 = ("a photo of a {0}", "there is a {0}")
CAPTION_TEMPLATES_2 = ("a {0} next to a {1}", "a photo of a {0} and a {1}")


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of a synthetic captioning world.

    ``n_classes`` object classes each own a cluster centre in appearance
    space.  The last ``n_novel`` classes are "novel": they appear in
    tag records and test images but never in fine-tuning captions.
    """

    n_classes: int = 12
    n_novel: int = 2
    d_app: int = 16
    n_pretrain: int = 400
    n_finetune: int = 300
    n_test: int = 20
    min_objects: int = 2
    max_objects: int = 4
    noise: float = 0.3
    image_size: tuple[int, int] = (640, 480)
    seed: int = 0
    multi_token: bool = True
    max_regions_per_object: int = 1
    max_background: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(OBJECT_WORDS) + len(SPLIT_WORDS):
            raise DataError(f"n_classes must lie in [1, {len(OBJECT_WORDS) + len(SPLIT_WORDS)}]")
        if not 0 <= self.n_novel < self.n_classes:
            raise DataError("n_novel must be smaller than n_classes")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DataError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.n_classes - self.n_novel:
            raise DataError("max_objects cannot exceed the number of familiar classes")


@dataclass
class World:
    spec: WorldSpec
    classes: list[str]
    novel: list[str]
    centers: np.ndarray
    vocab: Vocabulary
    pretrain: list[ImageTagRecord] = field(default_factory=list)
    finetune: list[ImageTagRecord] = field(default_factory=list)
    test: list[ImageTagRecord] = field(default_factory=list)

    @property
    def familiar(self) -> list[str]:
        return [c for c in self.classes if c not in self.novel]

    def class_list(self) -> list[dict]:
        return [{"name": c, "synonyms": [], "novel": c in self.novel} for c in self.classes]


def _class_names(spec: WorldSpec, rng: np.random.Generator) -> list[str]:
    plain = list(OBJECT_WORDS)
    split = list(SPLIT_WORDS)
    n_split = min(len(split), spec.n_classes // 4) if spec.multi_token else 0
    names = [plain[i] for i in rng.permutation(len(plain))[: spec.n_classes - n_split]]
    names += [split[i] for i in rng.permutation(len(split))[:n_split]]
    return [names[i] for i in rng.permutation(len(names))]


def _vocab_for(classes: Sequence[str]) -> Vocabulary:
    words = []
    for tmpl in CAPTION_TEMPLATES_1 + CAPTION_TEMPLATES_2:
        words.extend(w for w in tmpl.split() if "{" not in w)
    for c in classes:
        if c in SPLIT_WORDS:
            head, tail = SPLIT_WORDS[c]
            words.extend([head, CONTINUATION + tail])
        else:
            words.append(c)
    return Vocabulary.from_words(words)


def _layout_boxes(n: int, rng: np.random.Generator, size) -> list[tuple[float, float, float, float]]:
    """``n`` boxes in distinct vertical strips, ordered left to right."""
    width, height = size
    strip = width / n
    boxes = []
    for i in range(n):
        w = strip * rng.uniform(0.5, 0.9)
        x1 = i * strip + rng.uniform(0, strip - w)
        h = height * rng.uniform(0.3, 0.9)
        y1 = rng.uniform(0, height - h)
        boxes.append((round(x1, 2), round(y1, 2), round(x1 + w, 2), round(y1 + h, 2)))
    return boxes


def _render_caption(objects: Sequence[str], rng: np.random.Generator) -> str:
    templates = CAPTION_TEMPLATES_1 if len(objects) == 1 else CAPTION_TEMPLATES_2
    tmpl = templates[int(rng.integers(len(templates)))]
    return tmpl.format(*objects)


def _image(world_centers, classes, objects, rng, spec, rid, caption):
    counts = [int(rng.integers(1, spec.max_regions_per_object + 1)) for _ in objects]
    n_bg = int(rng.integers(0, spec.max_background + 1))
    boxes = _layout_boxes(len(objects), rng, spec.image_size)
    regions = []
    for obj, box, count in zip(objects, boxes, counts):
        c = classes.index(obj)
        for _ in range(count):
            app = world_centers[c] + rng.normal(0.0, spec.noise, size=spec.d_app)
            regions.append(RegionRecord(tuple(round(float(v), 6) for v in app), box, obj))
    width, height = spec.image_size
    for _ in range(n_bg):
        app = rng.normal(0.0, 1.0, size=spec.d_app)
        x1, y1 = rng.uniform(0, width * 0.5), rng.uniform(0, height * 0.5)
        box = (round(x1, 2), round(y1, 2), round(x1 + width * 0.4, 2), round(y1 + height * 0.4, 2))
        regions.append(RegionRecord(tuple(round(float(v), 6) for v in app), box, None))
    regions = [regions[i] for i in rng.permutation(len(regions))]
    tags = list(objects)
    tags = [tags[i] for i in rng.permutation(len(tags))]
    return ImageTagRecord(rid, tuple(tags), tuple(regions), tuple(float(v) for v in spec.image_size), caption)


def generate_world(spec: WorldSpec) -> World:
    """Sample a world and its three corpora.

    Regions of an image are laid out left to right; captions name the
    captioned objects in that left-to-right order.  Fine-tuning images hold
    only familiar objects.  Each test image holds exactly one novel object
    alongside familiar ones; its reference caption names all of them.
    """
    rng = make_rng(spec.seed)
    classes = _class_names(spec, rng)
    novel = classes[len(classes) - spec.n_novel:]
    familiar = classes[: len(classes) - spec.n_novel]
    centers = rng.normal(0.0, 1.0, size=(spec.n_classes, spec.d_app))
    world = World(spec, classes, novel, centers, _vocab_for(classes))

    def objects_from(pool, n):
        return [pool[i] for i in rng.permutation(len(pool))[:n]]

    hi = spec.max_objects + 1
    for i in range(spec.n_pretrain):
        n = int(rng.integers(spec.min_objects, hi))
        world.pretrain.append(_image(centers, classes, objects_from(classes, n), rng, spec, f"pt{i:05d}", None))
    for i in range(spec.n_finetune):
        n = int(rng.integers(1, min(2, spec.max_objects) + 1))
        objs = objects_from(familiar, n)
        world.finetune.append(_image(centers, classes, objs, rng, spec, f"ft{i:05d}", _render_caption(objs, rng)))
    for i in range(spec.n_test if novel else 0):
        n = int(rng.integers(1, min(2, spec.max_objects) + 1))
        objs = objects_from(familiar, n - 1) + [novel[i % len(novel)]]
        objs = [objs[j] for j in rng.permutation(len(objs))]
        world.test.append(_image(centers, classes, objs, rng, spec, f"te{i:05d}", _render_caption(objs, rng)))
    return world
