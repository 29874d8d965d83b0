"""Caption generation by mask insertion: greedy and constrained beam search.

A *scorer* maps a list of emitted-token prefixes to next-token log-probability
rows; :class:`EncoderScorer` does this with the encoder by building
``[CLS] prefix [MASK]`` inference batches.  [PAD], [CLS] and [MASK] are
never emitted.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import encoder
from .batching import Region, build_infer_batch
from .config import BatchConfig
from .encoder import Parameters
from .errors import EmptyConstraint, NoHypothesis
from .tokenizer import TagBlock, Vocabulary

Scorer = Callable[[Sequence[Sequence[int]]], np.ndarray]


class EncoderScorer:
    def __init__(self, params: Parameters, blocks: Sequence[TagBlock], regions: Sequence[Region],
                 vocab: Vocabulary, batch_cfg: BatchConfig):
        self.params, self.blocks, self.regions = params, list(blocks), list(regions)
        self.vocab, self.batch_cfg = vocab, batch_cfg

    def __call__(self, prefixes):
        v = self.vocab
        batches = [build_infer_batch([v.cls_id, *p, v.mask_id], self.blocks, self.regions, self.batch_cfg, v)
                   for p in prefixes]
        fr = encoder.forward(self.params, batches, pad_id=v.pad_id, keep_cache=False)
        return encoder.log_softmax(fr.slot_logits)


def _forbid(logp: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    logp = np.array(logp, dtype=np.float64)
    logp[..., [vocab.pad_id, vocab.cls_id, vocab.mask_id]] = -np.inf
    return logp


@dataclass(frozen=True)
class Hypothesis:
    token_ids: tuple[int, ...]
    logprob: float
    fsm_state: int = 0
    finished: bool = False
    token_logprobs: tuple[float, ...] = ()


@dataclass(frozen=True)
class DecodeResult:
    token_ids: list[int]
    token_logprobs: list[float]
    logprob: float
    satisfied: int = 0
    accepted: bool = True


def _strip(h: Hypothesis, sep_id: int) -> DecodeResult:
    ids = list(h.token_ids)
    lps = list(h.token_logprobs)
    if ids and ids[-1] == sep_id:
        ids, lps = ids[:-1], lps[:-1]
    return DecodeResult(ids, lps, h.logprob)


def greedy_search(scorer: Scorer, vocab: Vocabulary, max_len: int = 20) -> DecodeResult:
    """Argmax at the trailing [MASK] until [SEP] or ``max_len`` tokens."""
    ids: list[int] = []
    lps: list[float] = []
    while len(ids) < max_len:
        logp = _forbid(scorer([ids])[0], vocab)
        tok = int(np.argmax(logp))
        lps.append(float(logp[tok]))
        if tok == vocab.sep_id:
            return DecodeResult(ids, lps[:-1], float(sum(lps)))
        ids.append(tok)
    return DecodeResult(ids, lps, float(sum(lps)))


def greedy_decode(params: Parameters, blocks, regions, vocab: Vocabulary, batch_cfg: BatchConfig,
                  max_len: int = 20) -> list[int]:
    return greedy_search(EncoderScorer(params, blocks, regions, vocab, batch_cfg), vocab, max_len).token_ids


# ---------------------------------------------------------------- constraint automaton


def _kmp_table(pattern: Sequence[int]) -> list[int]:
    fail = [0] * len(pattern)
    k = 0
    for i in range(1, len(pattern)):
        while k and pattern[i] != pattern[k]:
            k = fail[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        fail[i] = k
    return fail


def _advance(pattern, fail, k: int, tok: int) -> int:
    while k and pattern[k] != tok:
        k = fail[k - 1]
    return k + 1 if pattern[k] == tok else 0


@dataclass
class ConstraintFsm:
    """Deterministic automaton tracking which constraints have appeared.

    A state is the tuple of per-constraint match progress (``-1`` once the
    constraint has been seen).  Tokens outside every constraint share one
    ``default`` transition per state.
    """

    constraints: list[tuple[int, ...]]
    states: list[tuple[int, ...]] = field(default_factory=list)
    transitions: list[dict[int, int]] = field(default_factory=list)
    default: list[int] = field(default_factory=list)
    satisfied: list[int] = field(default_factory=list)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def alphabet(self) -> list[int]:
        return sorted({t for c in self.constraints for t in c})

    def is_accepting(self, state: int) -> bool:
        return self.satisfied[state] == (1 << len(self.constraints)) - 1

    def step(self, state: int, token: int) -> int:
        return self.transitions[state].get(int(token), self.default[state])

    def run(self, tokens: Sequence[int], state: int = 0) -> int:
        for t in tokens:
            state = self.step(state, t)
        return state

    def table(self, vocab_size: int) -> np.ndarray:
        """(n_states, vocab_size) next-state table."""
        tab = np.repeat(np.asarray(self.default, dtype=np.int64)[:, None], vocab_size, axis=1)
        for s, trans in enumerate(self.transitions):
            for tok, nxt in trans.items():
                if tok < vocab_size:
                    tab[s, tok] = nxt
        return tab


def build_fsm(constraints: Sequence[Sequence[int]]) -> ConstraintFsm:
    """Product of one KMP matcher per constraint, restricted to reachable states."""
    cons = [tuple(int(t) for t in c) for c in constraints]
    if any(len(c) == 0 for c in cons):
        raise EmptyConstraint("constraints must be non-empty token sequences")
    fails = [_kmp_table(c) for c in cons]
    fsm = ConstraintFsm(cons)
    alphabet = fsm.alphabet

    def move(state, tok):
        out = []
        for c, f, k in zip(cons, fails, state):
            if k < 0:
                out.append(-1)
                continue
            k2 = _advance(c, f, k, tok) if tok in c else 0
            out.append(-1 if k2 == len(c) else k2)
        return tuple(out)

    start = tuple(0 for _ in cons)
    index = {start: 0}
    fsm.states.append(start)
    queue = deque([start])
    while queue:
        st = queue.popleft()
        trans = {}
        for tok in alphabet + [None]:
            nxt = move(st, tok) if tok is not None else tuple(-1 if k < 0 else 0 for k in st)
            if nxt not in index:
                index[nxt] = len(fsm.states)
                fsm.states.append(nxt)
                queue.append(nxt)
            if tok is None:
                fsm.default.append(index[nxt])
            else:
                trans[tok] = index[nxt]
        fsm.transitions.append(trans)
    fsm.satisfied = [sum(1 << i for i, k in enumerate(st) if k < 0) for st in fsm.states]
    return fsm


def contains_subsequence(seq: Sequence[int], sub: Sequence[int]) -> bool:
    n = len(sub)
    return any(tuple(seq[i:i + n]) == tuple(sub) for i in range(len(seq) - n + 1))


# ---------------------------------------------------------------- constrained beam search


def _better(a: Hypothesis, b: Hypothesis | None, norm: bool) -> bool:
    if b is None:
        return True
    sa = a.logprob / max(len(a.token_ids), 1) if norm else a.logprob
    sb = b.logprob / max(len(b.token_ids), 1) if norm else b.logprob
    if sa != sb:
        return sa > sb
    return a.token_ids < b.token_ids


def constrained_beam_search(scorer: Scorer, vocab: Vocabulary, fsm: ConstraintFsm, beam_width: int = 5,
                            max_len: int = 20, length_normalize: bool = False) -> DecodeResult:
    """Beam search with one beam of ``beam_width`` hypotheses per automaton state.

    The result is the best finished hypothesis in an accepting state.  When
    none exists, the finished hypothesis satisfying the most constraints
    wins, ties broken by log-probability.  The greedy continuation is always
    kept as a finished candidate, so without constraints the result never
    scores below greedy decoding.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    sep = vocab.sep_id
    finished: list[Hypothesis] = []
    greedy = greedy_search(scorer, vocab, max_len)
    g_ids = greedy.token_ids + ([sep] if len(greedy.token_ids) < max_len else [])
    g_lps = greedy.token_logprobs + ([greedy.logprob - sum(greedy.token_logprobs)] if len(g_ids) > len(greedy.token_ids) else [])
    finished.append(Hypothesis(tuple(g_ids), greedy.logprob, fsm.run(g_ids), True, tuple(g_lps)))

    beams: dict[int, list[Hypothesis]] = {0: [Hypothesis((), 0.0, 0)]}
    table = None
    for length in range(max_len):
        active = [h for state in sorted(beams) for h in beams[state]]
        if not active:
            break
        best_done = max((h.logprob for h in finished if fsm.is_accepting(h.fsm_state)), default=-np.inf)
        if not length_normalize and best_done >= max(h.logprob for h in active):
            break
        logp = _forbid(scorer([list(h.token_ids) for h in active]), vocab)
        if table is None:
            table = fsm.table(logp.shape[1])
        candidates: dict[int, list[tuple[float, tuple, int, int]]] = {}
        for hi, h in enumerate(active):
            scores = h.logprob + logp[hi]
            nxt_states = table[h.fsm_state]
            for tok in np.flatnonzero(np.isfinite(scores)):
                tok = int(tok)
                nxt = int(nxt_states[tok])
                ids = h.token_ids + (tok,)
                lps = h.token_logprobs + (float(logp[hi, tok]),)
                hyp = Hypothesis(ids, float(scores[tok]), nxt, tok == sep or len(ids) == max_len, lps)
                candidates.setdefault(nxt, []).append((-hyp.logprob, ids, hyp))
        # finished hypotheses compete for beam slots, so width 1 is exactly greedy
        beams = {}
        for state, cands in candidates.items():
            cands.sort(key=lambda c: (c[0], c[1]))
            for c in cands[:beam_width]:
                if c[2].finished:
                    finished.append(c[2])
                else:
                    beams.setdefault(state, []).append(c[2])

    if not finished:
        raise NoHypothesis("no hypothesis finished")
    best = None
    for h in finished:
        if fsm.is_accepting(h.fsm_state) and _better(h, best, length_normalize):
            best = h
    accepted = best is not None
    if best is None:
        top = max(bin(fsm.satisfied[h.fsm_state]).count("1") for h in finished)
        for h in finished:
            if bin(fsm.satisfied[h.fsm_state]).count("1") == top and _better(h, best, length_normalize):
                best = h
    res = _strip(best, sep)
    return DecodeResult(res.token_ids, res.token_logprobs, res.logprob, fsm.satisfied[best.fsm_state], accepted)


def cbs_decode(params: Parameters, blocks, regions, vocab: Vocabulary, batch_cfg: BatchConfig,
               fsm: ConstraintFsm, beam_width: int = 5, max_len: int = 20) -> list[int]:
    scorer = EncoderScorer(params, blocks, regions, vocab, batch_cfg)
    return constrained_beam_search(scorer, vocab, fsm, beam_width, max_len).token_ids
