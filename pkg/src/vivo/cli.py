"""``vivo`` command line: pretrain, finetune, caption, probe, gen-synthetic.

Every command writes its outputs atomically into ``--out`` and produces the
same bytes when rerun with the same inputs and seed.  Exit codes: 0 ok,
2 config, 3 data, 4 numeric divergence, 5 I/O, 1 anything else typed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from typing import Sequence

import numpy as np

from . import encoder
from .batching import build_finetune_batch, build_pretrain_batch
from .config import RunConfig, config_from_dict, config_to_dict, load_config
from .data import WorldSpec, generate_world, read_records, write_lines, write_records
from .decoding import EncoderScorer, build_fsm, constrained_beam_search, greedy_search
from .encoder import EncoderConfig, init_params
from .errors import ConfigError, DataError, VivoError, VivoIOError
from .plotting import plot_alignment, plot_training
from .probe import align, export_embeddings, mention_f1, ranking_auc
from .tokenizer import Vocabulary, build_tag_blocks, detokenize, tokenize
from .trainer import derive_seed, finetune, prepare_examples, pretrain

log = logging.getLogger("vivo")


# ---------------------------------------------------------------- helpers


def _out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise VivoIOError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else config_from_dict({})


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def _data_path(cfg: RunConfig, key: str) -> str:
    if key not in cfg.data:
        raise ConfigError(f"config needs data.{key}")
    return cfg.resolve(str(cfg.data[key]))


def _load_vocab(path: str) -> Vocabulary:
    try:
        return Vocabulary.load(path)
    except FileNotFoundError as exc:
        raise VivoIOError(f"vocabulary file not found: {path}") from exc
    except OSError as exc:
        raise VivoIOError(f"cannot read vocabulary {path}: {exc.strerror}") from exc


def encoder_config(cfg: RunConfig, vocab: Vocabulary) -> EncoderConfig:
    b, m = cfg.batch, cfg.model
    max_positions = max(b.max_caption + 2, max(b.max_tag_tokens, b.max_tags) + 1)
    return EncoderConfig(m.layers, m.hidden, m.heads, m.ff_dim, vocab.size, max_positions, b.d_region,
                         tie_head=m.tie_head, dropout=m.dropout)


def _check_vocab(params, vocab: Vocabulary) -> None:
    if params.config.vocab_size != vocab.size:
        raise ConfigError(f"checkpoint expects a vocabulary of {params.config.vocab_size} entries, "
                          f"vocabulary file has {vocab.size}")


def _write_json(path: str, obj) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise VivoIOError(f"cannot write {path}: {exc.strerror}") from exc


def _copy_vocab(src: str, out: str) -> None:
    dst = os.path.join(out, "vocab.txt")
    if os.path.abspath(src) != os.path.abspath(dst):
        try:
            shutil.copyfile(src, dst)
        except OSError as exc:
            raise VivoIOError(f"cannot copy vocabulary to {dst}: {exc.strerror}") from exc


def _vocab_for_checkpoint(explicit: str | None, cfg: RunConfig, checkpoint: str | None) -> str:
    if explicit:
        return explicit
    if "vocab" in cfg.data:
        return _data_path(cfg, "vocab")
    if checkpoint:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "vocab.txt")
        if os.path.exists(sibling):
            return sibling
    raise ConfigError("no vocabulary given: pass --vocab or set data.vocab")


# ---------------------------------------------------------------- training commands


def _train(args, phase: str) -> int:
    cfg = _with_seed(_config(args.config), args.seed)
    vocab_path = _data_path(cfg, "vocab")
    vocab = _load_vocab(vocab_path)
    need_caption = phase == "finetune"
    corpus = _data_path(cfg, phase)
    records = read_records(corpus, need_caption=need_caption, d_app=cfg.batch.d_app)
    examples = prepare_examples(records, vocab, need_caption)
    if not examples:
        raise DataError(f"corpus {corpus} holds no records")

    init = getattr(args, "init", None)
    if init is None and need_caption and "init" in cfg.data:
        init = _data_path(cfg, "init")
    if init:
        params = encoder.load(init)
        _check_vocab(params, vocab)
    else:
        params = init_params(encoder_config(cfg, vocab), derive_seed(cfg.train.seed, 0), cfg.model.init_std)

    if args.dry_run:
        ex = examples[0]
        if need_caption:
            batch = build_finetune_batch(ex.caption_ids, ex.blocks, ex.regions, 0, cfg.batch, vocab)
        else:
            batch = build_pretrain_batch(ex.blocks, ex.regions, 0, cfg.batch, vocab)
        encoder.forward(params, batch, pad_id=vocab.pad_id, keep_cache=False)
        print(f"ok: {len(examples)} records, {vocab.size} vocabulary entries, first batch length {batch.length}")
        return 0

    out = _out_dir(args.out)
    fn = finetune if need_caption else pretrain
    _, report = fn(examples, vocab, cfg.batch, cfg.train, params, out_dir=out, resume=args.resume)
    rows = report.records()
    write_lines(os.path.join(out, f"{phase}_report.jsonl"), rows)
    plot_training(rows, os.path.join(out, f"{phase}_curve.png"), title=phase)
    _copy_vocab(vocab_path, out)
    _write_json(os.path.join(out, f"{phase}_config.json"), config_to_dict(cfg))
    last = report.steps[-1] if report.steps else {}
    print(f"{phase}: {len(report.steps)} logged steps, final loss {last.get('loss', float('nan')):.6f}, "
          f"checkpoint {report.checkpoint}")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train(args, "finetune")


# ---------------------------------------------------------------- caption


def cmd_caption(args) -> int:
    cfg = _config(args.config)
    vocab = _load_vocab(_vocab_for_checkpoint(args.vocab, cfg, args.checkpoint))
    params = encoder.load(args.checkpoint)
    _check_vocab(params, vocab)
    records = read_records(args.input, d_app=cfg.batch.d_app)
    beam = args.beam if args.beam is not None else cfg.decode.beam_width
    max_len = args.max_len if args.max_len is not None else cfg.decode.max_len
    use_cbs = args.cbs or cfg.decode.cbs
    rows = []
    for i, rec in enumerate(records):
        try:
            blocks = build_tag_blocks(rec.tags, vocab)
        except DataError as exc:
            raise DataError(str(exc), i) from exc
        scorer = EncoderScorer(params, blocks, rec.region_objects(), vocab, cfg.batch)
        if use_cbs:
            words = args.constraints if args.constraints is not None else list(rec.tags)[: cfg.decode.num_constraints]
            fsm = build_fsm([tokenize(w, vocab) for w in words])
            res = constrained_beam_search(scorer, vocab, fsm, beam, max_len, cfg.decode.length_normalize)
        else:
            res = greedy_search(scorer, vocab, max_len)
        rows.append({"id": rec.id, "caption": detokenize(res.token_ids, vocab),
                     "token_logprobs": [round(x, 10) for x in res.token_logprobs]})
    out = _out_dir(args.out)
    write_lines(os.path.join(out, "captions.jsonl"), rows)
    print(f"captioned {len(rows)} images -> {os.path.join(out, 'captions.jsonl')}")
    return 0


# ---------------------------------------------------------------- probe


def _read_jsonl(path: str) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    except FileNotFoundError as exc:
        raise VivoIOError(f"file not found: {path}") from exc
    out = []
    for i, ln in enumerate(lines):
        try:
            out.append(json.loads(ln))
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON: {exc.msg}", i) from exc
    return out


def _probe_align(args, cfg, vocab, params, records, out) -> None:
    rows, pos, neg = [], [], []
    for rec in records:
        regions = rec.region_objects()
        scores = align(params, list(rec.tags), regions, vocab, cfg.batch, args.pooling)
        for s in scores:
            label = rec.regions[s.region_index].label
            rows.append({"id": rec.id, "region": s.region_index, "label": label, "tag": s.tag,
                         "cosine": round(s.cosine, 10)})
            if label is not None:
                (pos if s.tag == label else neg).append(s.cosine)
    auc = ranking_auc(pos, neg)
    rows.append({"summary": True, "pairs": len(pos) + len(neg), "auc": None if np.isnan(auc) else round(auc, 10)})
    write_lines(os.path.join(out, "alignment.jsonl"), rows)
    if records:
        rec = records[0]
        sim = np.array([[r["cosine"] for r in rows if r.get("id") == rec.id and r["region"] == k]
                        for k in range(len(rec.regions))])
        if sim.size:
            labels = [r.label or "-" for r in rec.regions]
            plot_alignment(sim, labels, list(rec.tags), os.path.join(out, "alignment.png"), title=rec.id)
    print(f"alignment AUC {auc:.4f} over {len(pos)} matched / {len(neg)} mismatched pairs")


def _load_classes(path: str | None, records) -> list:
    if path is None:
        return sorted({t.lower() for r in records for t in r.tags})
    return _read_jsonl(path)


def cmd_probe(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(args.out)
    if args.mode == "f1":
        if not args.captions:
            raise ConfigError("--mode f1 needs --captions")
        records = read_records(args.input)
        by_id = {str(c["id"]): str(c.get("caption", "")) for c in _read_jsonl(args.captions)}
        missing = [r.id for r in records if r.id not in by_id]
        if missing:
            raise DataError(f"no caption for image {missing[0]}")
        res = mention_f1([by_id[r.id] for r in records], [r.tags for r in records],
                         _load_classes(args.classes, records))
        row = {"precision": round(res.precision, 10), "recall": round(res.recall, 10), "f1": round(res.f1, 10),
               "tp": res.tp, "fp": res.fp, "fn": res.fn,
               "per_class": {k: res.per_class[k] for k in sorted(res.per_class)}}
        write_lines(os.path.join(out, "f1.jsonl"), [row])
        print(f"mention P={res.precision:.4f} R={res.recall:.4f} F1={res.f1:.4f}")
        return 0
    if not args.checkpoint:
        raise ConfigError(f"--mode {args.mode} needs --checkpoint")
    vocab = _load_vocab(_vocab_for_checkpoint(args.vocab, cfg, args.checkpoint))
    params = encoder.load(args.checkpoint)
    _check_vocab(params, vocab)
    records = read_records(args.input, d_app=cfg.batch.d_app)
    if args.mode == "align":
        _probe_align(args, cfg, vocab, params, records, out)
    else:
        path = os.path.join(out, "embeddings.tsv")
        n = export_embeddings(params, records, vocab, cfg.batch, path, args.pooling)
        print(f"exported {n} vectors -> {path}")
    return 0


# ---------------------------------------------------------------- synthetic world


def cmd_gen_synthetic(args) -> int:
    cfg = _config(args.config)
    raw = dict(cfg.data.get("world", {}))
    for key in ("n_classes", "n_novel", "n_pretrain", "n_finetune", "n_test"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.seed is not None:
        raw["seed"] = args.seed
    raw.setdefault("d_app", cfg.batch.d_app)
    known = {f.name for f in dataclasses.fields(WorldSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in data.world: {', '.join(unknown)}")
    if "image_size" in raw:
        raw["image_size"] = tuple(raw["image_size"])
    try:
        spec = WorldSpec(**raw)
    except DataError as exc:
        raise ConfigError(f"data.world: {exc}") from exc
    world = generate_world(spec)
    out = _out_dir(args.out)
    world.vocab.save(os.path.join(out, "vocab.txt"))
    write_records(os.path.join(out, "pretrain.jsonl"), world.pretrain)
    write_records(os.path.join(out, "finetune.jsonl"), world.finetune)
    write_records(os.path.join(out, "test.jsonl"), world.test)
    write_lines(os.path.join(out, "classes.jsonl"), world.class_list())
    run_cfg = {
        "batch": {"d_app": spec.d_app},
        "data": {"vocab": "vocab.txt", "pretrain": "pretrain.jsonl", "finetune": "finetune.jsonl",
                 "test": "test.jsonl", "classes": "classes.jsonl"},
    }
    _write_json(os.path.join(out, "config.json"), run_cfg)
    print(f"world: {len(world.classes)} classes ({', '.join(world.novel)} held out), "
          f"{len(world.pretrain)} tag / {len(world.finetune)} caption / {len(world.test)} test records -> {out}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vivo", description="Visual-vocabulary pre-training and novel-object captioning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        sp = sub.add_parser(name, help=f"run {name} training")
        common(sp, f"runs/{name}")
        sp.add_argument("--dry-run", action="store_true", help="validate inputs and build one batch, no training")
        sp.add_argument("--resume", help="checkpoint to resume from (needs its .optim file)")
        if name == "finetune":
            sp.add_argument("--init", help="initial checkpoint (default data.init, else random init)")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("caption", help="generate captions")
    common(sp, "runs/caption")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="image-tag records (JSONL)")
    sp.add_argument("--vocab", help="vocabulary file (default data.vocab or vocab.txt next to the checkpoint)")
    sp.add_argument("--cbs", action="store_true", help="constrained beam search")
    sp.add_argument("--beam", type=int, help="beam width per automaton state")
    sp.add_argument("--max-len", type=int, dest="max_len")
    sp.add_argument("--constraints", nargs="*", help="words every caption must contain (default: first tags)")
    sp.set_defaults(func=cmd_caption)

    sp = sub.add_parser("probe", help="alignment scores, embedding export or mention F1")
    common(sp, "runs/probe")
    sp.add_argument("--mode", choices=("align", "export", "f1"), required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", required=True, help="image-tag records (JSONL)")
    sp.add_argument("--vocab")
    sp.add_argument("--pooling", choices=("mean", "first"), default="mean")
    sp.add_argument("--captions", help="captions.jsonl for --mode f1")
    sp.add_argument("--classes", help="class list JSONL ({name, synonyms}) for --mode f1")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("gen-synthetic", help="write a synthetic world")
    common(sp, "runs/world")
    sp.add_argument("--classes", type=int, dest="n_classes")
    sp.add_argument("--novel", type=int, dest="n_novel")
    sp.add_argument("--pretrain", type=int, dest="n_pretrain")
    sp.add_argument("--finetune", type=int, dest="n_finetune")
    sp.add_argument("--test", type=int, dest="n_test")
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VivoError as exc:
        print(f"vivo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
