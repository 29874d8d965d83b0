"""Fused text+region inputs, attention masks and masking plans.

Sequence layouts (text positions first, region rows appended after them):

* pre-training:  tag tokens, [SEP] | regions
* fine-tuning:   [CLS] caption [SEP] | tag tokens [SEP] | regions
* inference:     [CLS] prefix [MASK] [SEP] | tag tokens [SEP] | regions

Position ids restart at 0 for the tag span, so a tag sequence gets the same
position ids in pre-training and in fine-tuning, and its representation does
not depend on the caption length.  Regions get no position embedding.

Randomness comes only from ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .config import BatchConfig
from .errors import DataError, EmptyCaption, EmptyTags, MalformedPrefix, OverLength
from .tokenizer import TagBlock, Vocabulary

SEG_CAPTION, SEG_TAG, SEG_REGION = 0, 1, 2
N_SEGMENTS = 3


class Mode(str, Enum):
    PRETRAIN = "PRETRAIN"
    FINETUNE = "FINETUNE"
    INFER = "INFER"


class Action(str, Enum):
    MASK = "MASK"
    RANDOM = "RANDOM"
    KEEP = "KEEP"


_ACTIONS = (Action.MASK, Action.RANDOM, Action.KEEP)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class Region:
    """Appearance vector plus (x1, y1, x2, y2, w, h) normalised by image size."""

    appearance: np.ndarray
    box: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        app = np.asarray(self.appearance, dtype=np.float64).reshape(-1)
        app.setflags(write=False)
        object.__setattr__(self, "appearance", app)
        box = tuple(float(v) for v in self.box)
        if len(box) != 6:
            raise DataError("region box must have 6 values (x1, y1, x2, y2, w, h)")
        x1, y1, x2, y2, w, h = box
        tol = 1e-6
        if not (-tol <= x1 <= x2 + tol and x2 <= 1 + tol and -tol <= y1 <= y2 + tol and y2 <= 1 + tol):
            raise DataError(f"region box {box} is not a normalised box inside the image")
        if abs(w - (x2 - x1)) > tol or abs(h - (y2 - y1)) > tol:
            raise DataError(f"region box {box}: width/height disagree with the corners")
        if not np.all(np.isfinite(app)) or not all(math.isfinite(v) for v in box):
            raise DataError("region features must be finite")
        object.__setattr__(self, "box", box)

    @classmethod
    def from_pixels(cls, appearance, box, image_size) -> "Region":
        """Build from pixel corners ``(x1, y1, x2, y2)`` and ``(width, height)``."""
        x1, y1, x2, y2 = (float(v) for v in box)
        width, height = (float(v) for v in image_size)
        if width <= 0 or height <= 0:
            raise DataError(f"image size must be positive, got {image_size}")
        nx1, nx2, ny1, ny2 = x1 / width, x2 / width, y1 / height, y2 / height
        return cls(appearance, (nx1, ny1, nx2, ny2, nx2 - nx1, ny2 - ny1))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.appearance, np.asarray(self.box)])


@dataclass(frozen=True)
class MaskSlot:
    position: int
    action: Action
    target_id: int
    block: int | None = None


@dataclass(frozen=True, eq=False)
class EncodedBatch:
    """One example laid out for the encoder.

    ``token_ids`` holds the model input (after mask replacement) and
    ``original_ids`` the pre-replacement tokens.  ``attn_mask[i, j]`` is true
    when row ``i`` may attend to column ``j``; rows/cols index text positions
    first, then regions.  ``block_spans`` gives (start, length) of each tag
    block in the text sequence.
    """

    token_ids: np.ndarray
    original_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    regions: np.ndarray
    attn_mask: np.ndarray
    mask_slots: tuple[MaskSlot, ...]
    mode: Mode
    block_spans: tuple[tuple[int, int], ...] = ()
    caption_span: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("token_ids", "original_ids", "segment_ids", "position_ids", "regions", "attn_mask"):
            getattr(self, name).setflags(write=False)

    @property
    def n_text(self) -> int:
        return len(self.token_ids)

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def length(self) -> int:
        return self.n_text + self.n_regions


def _check_regions(regions: Sequence[Region], config: BatchConfig) -> np.ndarray:
    if len(regions) > config.max_regions:
        raise OverLength(f"{len(regions)} regions exceed max_regions={config.max_regions}")
    for k, r in enumerate(regions):
        if r.appearance.shape[0] != config.d_app:
            raise DataError(f"region {k} has {r.appearance.shape[0]} appearance values, expected d_app={config.d_app}")
    if not regions:
        return np.zeros((0, config.d_region))
    return np.stack([r.vector() for r in regions])


def _draw_actions(rng: np.random.Generator, n: int, config: BatchConfig) -> list[Action]:
    return [_ACTIONS[i] for i in rng.choice(3, size=n, p=config.mask_action_probs)]


def _apply_action(action: Action, original: int, vocab: Vocabulary, rng: np.random.Generator) -> int:
    if action is Action.MASK:
        return vocab.mask_id
    if action is Action.RANDOM:
        choices = [i for i in range(vocab.size) if i not in vocab.special_ids]
        return int(choices[rng.integers(len(choices))])
    return original


def _mask_budget(n_tokens: int, rate: float) -> int:
    # tolerance keeps e.g. 0.15 * 20 from rounding up to 4
    return max(1, math.ceil(rate * n_tokens - 1e-9))


def _context_mask(n_caption: int, n_total: int) -> np.ndarray:
    """Causal caption span followed by a bidirectional context span."""
    mask = np.zeros((n_total, n_total), dtype=bool)
    mask[:n_caption, :n_caption] = np.tril(np.ones((n_caption, n_caption), dtype=bool))
    mask[:, n_caption:] = True
    return mask


def _tag_span(blocks: Sequence[TagBlock], vocab: Vocabulary, limit: int, limit_name: str):
    ids: list[int] = []
    spans = []
    for b in blocks:
        spans.append((len(ids), len(b.token_ids)))
        ids.extend(b.token_ids)
    if len(ids) > limit:
        raise OverLength(f"{len(ids)} tag tokens exceed {limit_name}={limit}")
    return ids + [vocab.sep_id], spans


def plan_tag_masking(blocks: Sequence[TagBlock], rng: np.random.Generator, mask_rate: float) -> list[int]:
    """Indices of the tag blocks to mask, in the order they were drawn.

    Whole tags are drawn uniformly without replacement until the masked token
    count reaches ceil(mask_rate * total tokens); at least one tag is masked.
    """
    total = sum(len(b) for b in blocks)
    budget = _mask_budget(total, mask_rate)
    chosen: list[int] = []
    masked = 0
    for idx in rng.permutation(len(blocks)):
        chosen.append(int(idx))
        masked += len(blocks[idx])
        if masked >= budget:
            break
    return chosen


def build_pretrain_batch(
    blocks: Sequence[TagBlock],
    regions: Sequence[Region],
    rng_seed: int,
    config: BatchConfig,
    vocab: Vocabulary,
    mask: bool = True,
) -> EncodedBatch:
    """Tag tokens + [SEP] + regions with whole-tag masking.

    ``mask=False`` builds the same layout with no masking (used by the probe).
    """
    if not blocks:
        raise EmptyTags("pre-training needs at least one tag")
    original, spans = _tag_span(blocks, vocab, config.max_tag_tokens, "max_tag_tokens")
    region_rows = _check_regions(regions, config)
    n_text, k = len(original), region_rows.shape[0]

    tokens = list(original)
    slots: list[MaskSlot] = []
    if mask:
        rng = make_rng(rng_seed)
        chosen = plan_tag_masking(blocks, rng, config.mask_rate)
        positions = []
        for b in chosen:
            start, length = spans[b]
            positions.extend((start + j, b) for j in range(length))
        positions.sort()
        actions = _draw_actions(rng, len(positions), config)
        for (pos, b), action in zip(positions, actions):
            tokens[pos] = _apply_action(action, original[pos], vocab, rng)
            slots.append(MaskSlot(pos, action, original[pos], b))

    return EncodedBatch(
        token_ids=np.asarray(tokens, dtype=np.int64),
        original_ids=np.asarray(original, dtype=np.int64),
        segment_ids=np.asarray([SEG_TAG] * n_text + [SEG_REGION] * k, dtype=np.int64),
        position_ids=np.arange(n_text, dtype=np.int64),
        regions=region_rows,
        attn_mask=np.ones((n_text + k, n_text + k), dtype=bool),
        mask_slots=tuple(slots),
        mode=Mode.PRETRAIN,
        block_spans=tuple(spans),
    )


def _context_batch(caption_part, blocks, regions, config, vocab, mode, slots_fn):
    tag_ids, spans = _tag_span(blocks, vocab, config.max_tags, "max_tags")
    region_rows = _check_regions(regions, config)
    n_cap = len(caption_part)
    original = list(caption_part) + tag_ids
    n_text, k = len(original), region_rows.shape[0]
    tokens, slots = slots_fn(original, n_cap)
    return EncodedBatch(
        token_ids=np.asarray(tokens, dtype=np.int64),
        original_ids=np.asarray(original, dtype=np.int64),
        segment_ids=np.asarray(
            [SEG_CAPTION] * n_cap + [SEG_TAG] * len(tag_ids) + [SEG_REGION] * k, dtype=np.int64
        ),
        position_ids=np.concatenate([np.arange(n_cap), np.arange(len(tag_ids))]).astype(np.int64),
        regions=region_rows,
        attn_mask=_context_mask(n_cap, n_text + k),
        mask_slots=tuple(slots),
        mode=mode,
        block_spans=tuple((n_cap + s, n) for s, n in spans),
        caption_span=(0, n_cap),
    )


def build_finetune_batch(
    caption_ids: Sequence[int],
    blocks: Sequence[TagBlock],
    regions: Sequence[Region],
    rng_seed: int,
    config: BatchConfig,
    vocab: Vocabulary,
) -> EncodedBatch:
    """[CLS] caption [SEP] tags [SEP] regions, masking caption tokens only.

    ceil(mask_rate * len(caption_ids)) slots are drawn uniformly from the
    caption tokens and the closing [SEP]; predicting that [SEP] is how the
    model learns where a caption ends.
    """
    caption_ids = [int(t) for t in caption_ids]
    if not caption_ids:
        raise EmptyCaption("caption has no tokens")
    if len(caption_ids) > config.max_caption:
        raise OverLength(f"{len(caption_ids)} caption tokens exceed max_caption={config.max_caption}")
    caption_part = [vocab.cls_id, *caption_ids, vocab.sep_id]

    def slots_fn(original, n_cap):
        rng = make_rng(rng_seed)
        candidates = np.arange(1, n_cap)
        n_mask = _mask_budget(len(caption_ids), config.mask_rate)
        positions = sorted(int(p) for p in rng.choice(candidates, size=n_mask, replace=False))
        actions = _draw_actions(rng, n_mask, config)
        tokens = list(original)
        slots = []
        for pos, action in zip(positions, actions):
            tokens[pos] = _apply_action(action, original[pos], vocab, rng)
            slots.append(MaskSlot(pos, action, original[pos], None))
        return tokens, slots

    return _context_batch(caption_part, blocks, regions, config, vocab, Mode.FINETUNE, slots_fn)


def build_infer_batch(
    prefix_ids: Sequence[int],
    blocks: Sequence[TagBlock],
    regions: Sequence[Region],
    config: BatchConfig,
    vocab: Vocabulary,
) -> EncodedBatch:
    """Decoding input: ``prefix_ids`` is [CLS] w1 .. wn [MASK]."""
    prefix = [int(t) for t in prefix_ids]
    if len(prefix) < 2 or prefix[0] != vocab.cls_id or prefix[-1] != vocab.mask_id:
        raise MalformedPrefix("inference prefix must start with [CLS] and end with [MASK]")
    if vocab.mask_id in prefix[1:-1]:
        raise MalformedPrefix("inference prefix may hold only one trailing [MASK]")
    if len(prefix) - 1 > config.max_caption:
        raise OverLength(f"prefix of {len(prefix) - 1} caption tokens exceeds max_caption={config.max_caption}")
    caption_part = prefix + [vocab.sep_id]
    mask_pos = len(prefix) - 1

    def slots_fn(original, n_cap):
        return list(original), [MaskSlot(mask_pos, Action.MASK, vocab.mask_id, None)]

    return _context_batch(caption_part, blocks, regions, config, vocab, Mode.INFER, slots_fn)
