"""Pre-training and fine-tuning loops.

Randomness per step is derived from ``(seed, step)`` and the epoch order from
``(seed, epoch)``, so a run resumed from a saved state replays the same
batches as the uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import encoder
from .batching import (
    EncodedBatch,
    build_finetune_batch,
    build_infer_batch,
    build_pretrain_batch,
    make_rng,
)
from .config import BatchConfig, LossMode, Phase, TrainConfig
from .data import ImageTagRecord, write_lines
from .encoder import Parameters
from .errors import DataError, DivergedLoss, VivoIOError
from .matching import match_targets
from .tokenizer import TagBlock, Vocabulary, build_tag_blocks, tokenize

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0])


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with optional decoupled weight decay.

    ``step`` mutates ``params`` in place; ``state`` holds the moment arrays.
    """

    def __init__(self, params: Parameters, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: Parameters, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * params[name]
            params[name] -= lr * update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class Example:
    blocks: tuple[TagBlock, ...]
    regions: tuple
    caption_ids: tuple[int, ...] = ()
    labels: tuple = ()


def prepare_examples(records: Sequence[ImageTagRecord], vocab: Vocabulary, need_caption: bool = False) -> list[Example]:
    out = []
    for i, rec in enumerate(records):
        try:
            blocks = tuple(build_tag_blocks(rec.tags, vocab))
            regions = tuple(rec.region_objects())
            caption = ()
            if need_caption:
                if rec.caption is None:
                    raise DataError("caption is required")
                caption = tuple(tokenize(rec.caption, vocab))
                if not caption:
                    raise DataError("caption tokenizes to nothing")
        except DataError as exc:
            raise DataError(str(exc), i) from exc
        out.append(Example(blocks, regions, caption, tuple(r.label for r in rec.regions)))
    return out


# ---------------------------------------------------------------- reports


@dataclass
class TrainReport:
    phase: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def records(self) -> list[dict]:
        """Line-delimited report rows; wall time is left out so reruns are byte-identical."""
        rows = [{"type": "step", **s} for s in self.steps]
        rows += [{"type": "epoch", **e} for e in self.epochs]
        return rows

    def write(self, path: str) -> None:
        write_lines(path, self.records())


def _set_accuracy_counts(pred: np.ndarray, slots) -> tuple[int, int]:
    """Masked blocks recovered as an unordered multiset, and total masked blocks."""
    groups: dict[object, list[int]] = {}
    for i, s in enumerate(slots):
        groups.setdefault(("slot", i) if s.block is None else s.block, []).append(i)
    want: dict[tuple, int] = {}
    got: dict[tuple, int] = {}
    for idx in groups.values():
        tgt = tuple(slots[i].target_id for i in idx)
        prd = tuple(int(pred[i]) for i in idx)
        want[tgt] = want.get(tgt, 0) + 1
        got[prd] = got.get(prd, 0) + 1
    hit = sum(min(n, got.get(k, 0)) for k, n in want.items())
    return hit, len(groups)


# ---------------------------------------------------------------- training loop


def _state_arrays(opt: Adam) -> dict[str, np.ndarray]:
    arrays = {f"m.{k}": v for k, v in opt.m.items()}
    arrays.update({f"v.{k}": v for k, v in opt.v.items()})
    return arrays


def save_state(path: str, params: Parameters, opt: Adam, step: int, phase: str) -> None:
    """Checkpoint plus optimizer moments, for exact resumption."""
    encoder.save(params, path)
    meta = {"step": step, "t": opt.t, "phase": phase}
    encoder.save_tensors(path + ".optim", meta, _state_arrays(opt))


def load_state(path: str, params_like: Parameters | None = None):
    params = encoder.load(path, params_like.config if params_like is not None else None)
    meta, arrays = encoder.load_tensors(path + ".optim")
    opt = Adam(params, 1.0)
    for k in params:
        if f"m.{k}" not in arrays or f"v.{k}" not in arrays:
            raise VivoIOError(f"{path}.optim: missing optimizer moments for {k}")
        opt.m[k] = arrays[f"m.{k}"].copy()
        opt.v[k] = arrays[f"v.{k}"].copy()
    opt.t = int(meta["t"])
    return params, opt, int(meta["step"])


BatchFn = Callable[[Example, int], EncodedBatch]


def _run(
    phase: Phase,
    examples: list[Example],
    vocab: Vocabulary,
    batch_cfg: BatchConfig,
    train_cfg: TrainConfig,
    params: Parameters,
    make_batch: BatchFn,
    out_dir: str | None = None,
    resume: str | None = None,
    stop_after: int | None = None,
) -> tuple[Parameters, TrainReport]:
    if not examples:
        raise DataError("corpus is empty")
    started = time.perf_counter()
    params = params.copy()
    opt = Adam(params, train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2,
               train_cfg.adam_eps, train_cfg.weight_decay)
    start_step = 0
    if resume:
        params, opt, start_step = load_state(resume, params)
        opt.lr, opt.beta1, opt.beta2 = train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2
        opt.eps, opt.weight_decay = train_cfg.adam_eps, train_cfg.weight_decay
    report = TrainReport(phase.value)
    n = len(examples)
    bs = min(train_cfg.batch_size, n)
    per_epoch = max(1, n // bs)
    end = train_cfg.steps if stop_after is None else min(train_cfg.steps, stop_after)
    epoch_acc = {"token_hit": 0, "token_n": 0, "set_hit": 0, "set_n": 0, "loss": 0.0, "steps": 0}

    order_cache: dict[int, np.ndarray] = {}

    def order(epoch):
        if epoch not in order_cache:
            order_cache.clear()
            order_cache[epoch] = make_rng(derive_seed(train_cfg.seed, 1, epoch)).permutation(n)
        return order_cache[epoch]

    for step in range(start_step, end):
        epoch, within = divmod(step, per_epoch)
        idx = order(epoch)[within * bs:(within + 1) * bs]
        batches = [make_batch(examples[i], derive_seed(train_cfg.seed, 2, step, j)) for j, i in enumerate(idx)]
        drop_rng = make_rng(derive_seed(train_cfg.seed, 3, step)) if params.config.dropout > 0 else None
        fr = encoder.forward(params, batches, pad_id=vocab.pad_id, dropout_rng=drop_rng)
        logp = encoder.log_softmax(fr.slot_logits)
        probs = np.exp(logp)
        if not np.all(np.isfinite(logp)):
            raise DivergedLoss(f"non-finite slot log-probabilities at step {step}")
        targets = []
        offset = 0
        token_hit = set_hit = set_n = 0
        pred = fr.slot_logits.argmax(-1)
        for b in batches:
            k = len(b.mask_slots)
            sl = slice(offset, offset + k)
            if train_cfg.loss_mode is LossMode.HUNGARIAN and phase is Phase.PRETRAIN:
                tgt, _ = match_targets(probs[sl], b.mask_slots)
            else:
                tgt = np.array([s.target_id for s in b.mask_slots], dtype=np.int64)
            targets.append(tgt)
            token_hit += int(sum(int(pred[offset + i]) == s.target_id for i, s in enumerate(b.mask_slots)))
            h, m = _set_accuracy_counts(pred[sl], b.mask_slots)
            set_hit += h
            set_n += m
            offset += k
        targets = np.concatenate(targets)
        total = len(targets)
        loss = float(-logp[np.arange(total), targets].sum() / total)
        if not math.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at step {step}")
        dlogits = probs.copy()
        dlogits[np.arange(total), targets] -= 1.0
        dlogits /= total
        grads = encoder.backward(params, fr, dlogits)
        gnorm = clip_global_norm(grads, train_cfg.grad_clip)
        if not math.isfinite(gnorm):
            raise DivergedLoss(f"gradient norm became {gnorm} at step {step}")
        lr = train_cfg.learning_rate
        if train_cfg.warmup_steps:
            lr *= min(1.0, (step + 1) / train_cfg.warmup_steps)
        opt.step(params, grads, lr)

        row = {"step": step, "loss": round(loss, 10), "token_acc": round(token_hit / total, 10),
               "set_acc": round(set_hit / max(set_n, 1), 10)}
        if step % train_cfg.log_every == 0 or step == end - 1:
            report.steps.append(row)
        for key, val in (("token_hit", token_hit), ("token_n", total), ("set_hit", set_hit), ("set_n", set_n)):
            epoch_acc[key] += val
        epoch_acc["loss"] += loss
        epoch_acc["steps"] += 1
        if within == per_epoch - 1 or step == end - 1:
            report.epochs.append({
                "epoch": epoch,
                "loss": round(epoch_acc["loss"] / epoch_acc["steps"], 10),
                "token_acc": round(epoch_acc["token_hit"] / max(epoch_acc["token_n"], 1), 10),
                "set_acc": round(epoch_acc["set_hit"] / max(epoch_acc["set_n"], 1), 10),
            })
            epoch_acc = dict.fromkeys(epoch_acc, 0)
            epoch_acc["loss"] = 0.0
        if out_dir and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_state(os.path.join(out_dir, f"step{step + 1:06d}.ckpt"), params, opt, step + 1, phase.value)

    if out_dir:
        final = os.path.join(out_dir, f"{phase.value.lower()}.ckpt")
        save_state(final, params, opt, end, phase.value)
        report.checkpoint = final
    report.wall_time = time.perf_counter() - started
    log.info("%s: %d steps in %.1fs", phase.value, end - start_step, report.wall_time)
    return params, report


def _shuffled_blocks(ex: Example, seed: int, shuffle: bool) -> tuple:
    if not shuffle or len(ex.blocks) < 2:
        return ex.blocks
    perm = make_rng(seed ^ 0x5DEECE66D).permutation(len(ex.blocks))
    return tuple(ex.blocks[i] for i in perm)


def pretrain(
    examples: list[Example],
    vocab: Vocabulary,
    batch_cfg: BatchConfig,
    train_cfg: TrainConfig,
    params: Parameters,
    out_dir: str | None = None,
    resume: str | None = None,
    stop_after: int | None = None,
) -> tuple[Parameters, TrainReport]:
    """Masked-tag pre-training on image-tag examples.

    ``loss_mode`` selects the set-matched loss (HUNGARIAN), the ordered
    masked-LM loss (ORDERED), or ordered loss with a single masked tag per
    example (SINGLE_MASK).
    """
    train_cfg = dataclasses.replace(train_cfg, phase=Phase.PRETRAIN, loss_mode=train_cfg.loss_mode)
    cfg = batch_cfg
    if train_cfg.loss_mode is LossMode.SINGLE_MASK:
        cfg = dataclasses.replace(batch_cfg, mask_rate=1e-6)

    def make_batch(ex: Example, seed: int) -> EncodedBatch:
        blocks = _shuffled_blocks(ex, seed, train_cfg.shuffle_tags)
        return build_pretrain_batch(blocks, ex.regions, seed, cfg, vocab)

    return _run(Phase.PRETRAIN, examples, vocab, batch_cfg, train_cfg, params, make_batch, out_dir, resume, stop_after)


def finetune(
    examples: list[Example],
    vocab: Vocabulary,
    batch_cfg: BatchConfig,
    train_cfg: TrainConfig,
    params: Parameters,
    out_dir: str | None = None,
    resume: str | None = None,
    stop_after: int | None = None,
) -> tuple[Parameters, TrainReport]:
    """Caption fine-tuning with the ordered masked-LM loss on caption tokens."""
    train_cfg = dataclasses.replace(train_cfg, phase=Phase.FINETUNE)

    def make_batch(ex: Example, seed: int) -> EncodedBatch:
        blocks = _shuffled_blocks(ex, seed, train_cfg.shuffle_tags)
        return build_finetune_batch(ex.caption_ids, blocks, ex.regions, seed, batch_cfg, vocab)

    return _run(Phase.FINETUNE, examples, vocab, batch_cfg, train_cfg, params, make_batch, out_dir, resume, stop_after)


# ---------------------------------------------------------------- evaluation


def evaluate_pretrain(params: Parameters, examples: Sequence[Example], vocab: Vocabulary,
                      batch_cfg: BatchConfig, seeds: Sequence[int] = (0,)) -> dict:
    """Masked-token and masked-set accuracy with every chosen token replaced by [MASK]."""
    cfg = dataclasses.replace(batch_cfg, mask_action_probs=(1.0, 0.0, 0.0))
    token_hit = token_n = set_hit = set_n = 0
    for seed in seeds:
        batches = [build_pretrain_batch(ex.blocks, ex.regions, derive_seed(seed, i), cfg, vocab)
                   for i, ex in enumerate(examples)]
        for chunk in range(0, len(batches), 64):
            part = batches[chunk:chunk + 64]
            fr = encoder.forward(params, part, pad_id=vocab.pad_id, keep_cache=False)
            pred = fr.slot_logits.argmax(-1)
            off = 0
            for b in part:
                k = len(b.mask_slots)
                token_hit += sum(int(pred[off + i]) == s.target_id for i, s in enumerate(b.mask_slots))
                token_n += k
                h, m = _set_accuracy_counts(pred[off:off + k], b.mask_slots)
                set_hit += h
                set_n += m
                off += k
    return {"token_acc": token_hit / max(token_n, 1), "set_acc": set_hit / max(set_n, 1)}


def teacher_forced_accuracy(params: Parameters, examples: Sequence[Example], vocab: Vocabulary,
                            batch_cfg: BatchConfig) -> float:
    """Fraction of caption tokens (plus the closing [SEP]) predicted from the gold prefix."""
    batches, targets = [], []
    for ex in examples:
        seq = list(ex.caption_ids) + [vocab.sep_id]
        for t in range(len(seq)):
            prefix = [vocab.cls_id, *ex.caption_ids[:t], vocab.mask_id]
            batches.append(build_infer_batch(prefix, ex.blocks, ex.regions, batch_cfg, vocab))
            targets.append(seq[t])
    hits = 0
    for chunk in range(0, len(batches), 128):
        fr = encoder.forward(params, batches[chunk:chunk + 128], pad_id=vocab.pad_id, keep_cache=False)
        hits += int((fr.slot_logits.argmax(-1) == np.asarray(targets[chunk:chunk + 128])).sum())
    return hits / max(len(targets), 1)


__all__ = [
    "Adam", "Example", "TrainReport", "clip_global_norm", "derive_seed", "evaluate_pretrain", "finetune",
    "load_state", "prepare_examples", "pretrain", "save_state", "teacher_forced_accuracy",
]
