"""Alignment probe, embedding export and object-mention F1."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import encoder
from .batching import Region, build_pretrain_batch
from .config import BatchConfig
from .encoder import Parameters
from .errors import VivoIOError
from .tokenizer import TagBlock, Vocabulary, build_tag_blocks


@dataclass(frozen=True)
class AlignmentScore:
    region_index: int
    tag: str
    cosine: float


def _unmasked_states(params, blocks, regions, vocab, batch_cfg):
    batch = build_pretrain_batch(blocks, regions, 0, batch_cfg, vocab, mask=False)
    fr = encoder.forward(params, batch, pad_id=vocab.pad_id, keep_cache=False)
    return batch, fr.last_layer()


def _tag_vectors(states, batch, pooling: str) -> np.ndarray:
    rows = []
    for start, length in batch.block_spans:
        span = states[start:start + length]
        rows.append(span[0] if pooling == "first" else span.mean(0))
    return np.asarray(rows)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    sim = (a @ b.T) / np.maximum(na * nb.T, 1e-300)
    return np.clip(sim, -1.0, 1.0)


def align(params: Parameters, tags: Sequence[str] | Sequence[TagBlock], regions: Sequence[Region],
          vocab: Vocabulary, batch_cfg: BatchConfig, pooling: str = "mean") -> list[AlignmentScore]:
    """Cosine similarity between last-layer region and tag representations.

    All tags and regions go through the encoder together, unmasked.  A
    multi-token tag is represented by the mean of its token rows, or its
    first token row with ``pooling="first"``.
    """
    if pooling not in ("mean", "first"):
        raise ValueError("pooling must be 'mean' or 'first'")
    blocks = [t if isinstance(t, TagBlock) else None for t in tags]
    if any(b is None for b in blocks):
        blocks = build_tag_blocks(list(tags), vocab)
    batch, states = _unmasked_states(params, blocks, regions, vocab, batch_cfg)
    tag_vecs = _tag_vectors(states, batch, pooling)
    region_vecs = states[batch.n_text:]
    sim = cosine_matrix(region_vecs, tag_vecs)
    return [AlignmentScore(k, blocks[m].tag_text, float(sim[k, m]))
            for k in range(len(regions)) for m in range(len(blocks))]


def ranking_auc(positive: Sequence[float], negative: Sequence[float]) -> float:
    """Probability a random positive outranks a random negative (ties count half)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if not len(pos) or not len(neg):
        return float("nan")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def alignment_auc(params, examples, vocab, batch_cfg, pooling="mean") -> float:
    """AUC of matched vs mismatched (region, tag) cosines over labelled examples."""
    pos, neg = [], []
    for ex in examples:
        scores = align(params, list(ex.blocks), list(ex.regions), vocab, batch_cfg, pooling)
        for s in scores:
            label = ex.labels[s.region_index]
            if label is None:
                continue
            (pos if s.tag == label else neg).append(s.cosine)
    return ranking_auc(pos, neg)


def _fmt(x: float) -> str:
    return f"{x:.8f}"


def export_embeddings(params: Parameters, records: Iterable, vocab: Vocabulary, batch_cfg: BatchConfig,
                      path: str | os.PathLike, pooling: str = "mean") -> int:
    """Write last-layer vectors for every region and tag; returns the record count.

    Format: a header line ``# id<TAB>modality<TAB>label<TAB>h0 .. h{H-1}``,
    then one tab-separated line per region (modality ``REGION``, label = the
    region's class label or ``-``) and per tag (modality ``TAG``, label =
    the tag text).  ids are ``<image id>/r<k>`` and ``<image id>/t<m>``.
    Vectors use fixed 8-digit decimals.
    """
    h = params.config.hidden
    lines = ["#" + "\t".join(["id", "modality", "label"] + [f"h{i}" for i in range(h)])]
    for rec in records:
        blocks = build_tag_blocks(rec.tags, vocab)
        regions = rec.region_objects()
        batch, states = _unmasked_states(params, blocks, regions, vocab, batch_cfg)
        for k in range(len(regions)):
            label = rec.regions[k].label or "-"
            vec = states[batch.n_text + k]
            lines.append("\t".join([f"{rec.id}/r{k}", "REGION", label] + [_fmt(v) for v in vec]))
        for m, vec in enumerate(_tag_vectors(states, batch, pooling)):
            lines.append("\t".join([f"{rec.id}/t{m}", "TAG", blocks[m].tag_text] + [_fmt(v) for v in vec]))
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise VivoIOError(f"cannot write {path}: {exc.strerror}") from exc
    return len(lines) - 1


def read_embeddings(path: str) -> list[tuple[str, str, str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            out.append((parts[0], parts[1], parts[2], np.asarray(parts[3:], dtype=np.float64)))
    return out


# ---------------------------------------------------------------- mention F1


@dataclass(frozen=True)
class ClassInfo:
    name: str
    synonyms: tuple[str, ...] = ()


@dataclass
class MentionF1:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_class: dict = field(default_factory=dict)


def _pattern(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.lower().split()]
    return re.compile(r"(?<![\w])" + r"\s+".join(words) + r"(?![\w])")


def mentioned_classes(caption: str, classes: Sequence[ClassInfo]) -> set[str]:
    text = caption.lower()
    found = set()
    for c in classes:
        if any(_pattern(p).search(text) for p in (c.name, *c.synonyms)):
            found.add(c.name)
    return found


def mention_f1(generated: Sequence[str], ground_truth_tags: Sequence[Iterable[str]],
               class_list: Sequence[ClassInfo | str | dict]) -> MentionF1:
    """Micro-averaged precision/recall/F1 of class mentions against ground-truth tags.

    Only classes in ``class_list`` are scored.  A class is mentioned when its
    name or a synonym occurs in the lowercased caption at word boundaries.
    """
    classes = []
    for c in class_list:
        if isinstance(c, ClassInfo):
            classes.append(c)
        elif isinstance(c, dict):
            classes.append(ClassInfo(str(c["name"]).lower(), tuple(s.lower() for s in c.get("synonyms", ()))))
        else:
            classes.append(ClassInfo(str(c).lower()))
    names = {c.name for c in classes}
    per = {c.name: {"tp": 0, "fp": 0, "fn": 0} for c in classes}
    for caption, tags in zip(generated, ground_truth_tags):
        truth = {t.lower().strip() for t in tags} & names
        said = mentioned_classes(caption, classes)
        for name in said & truth:
            per[name]["tp"] += 1
        for name in said - truth:
            per[name]["fp"] += 1
        for name in truth - said:
            per[name]["fn"] += 1
    tp = sum(v["tp"] for v in per.values())
    fp = sum(v["fp"] for v in per.values())
    fn = sum(v["fn"] for v in per.values())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MentionF1(p, r, f, tp, fp, fn, per)
