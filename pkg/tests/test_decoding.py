import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vivo import encoder
from vivo.batching import build_infer_batch
from vivo.config import BatchConfig
from vivo.decoding import (
    EncoderScorer, build_fsm, cbs_decode, constrained_beam_search, contains_subsequence, greedy_decode,
    greedy_search,
)
from vivo.errors import EmptyConstraint, NoHypothesis
from vivo.tokenizer import Vocabulary, build_tag_blocks

from conftest import random_regions, tiny_params

V = Vocabulary.from_words(["a", "b", "c", "d"])
WORDS = [V.id(w) for w in "abcd"]
EMIT = WORDS + [V.sep_id]


class ScriptedScorer:
    """Emits a fixed token sequence with probability 0.9 at each step."""

    def __init__(self, script):
        self.script = script

    def __call__(self, prefixes):
        rows = []
        for p in prefixes:
            nxt = self.script[len(p)] if len(p) < len(self.script) else V.sep_id
            row = np.full(V.size, math.log(0.1 / (V.size - 1)))
            row[nxt] = math.log(0.9)
            rows.append(row)
        return np.array(rows)


class TableScorer:
    """Deterministic pseudo-random next-token distribution per prefix."""

    def __init__(self, seed, sep_bias=0.0):
        self.seed, self.sep_bias = seed, sep_bias

    def dist(self, prefix):
        rng = np.random.default_rng([self.seed, len(prefix), *prefix])
        logits = rng.normal(size=V.size) * 2.0
        logits[V.sep_id] += self.sep_bias
        return encoder.log_softmax(logits)

    def __call__(self, prefixes):
        return np.array([self.dist(list(p)) for p in prefixes])


def forbid(row):
    row = row.copy()
    row[[V.pad_id, V.cls_id, V.mask_id]] = -np.inf
    return row


def exhaustive_best(scorer, constraints, max_len):
    """Best finished sequence over the whole space of length <= max_len sequences."""
    best, best_lp = None, -np.inf
    for n in range(max_len + 1):
        for words in itertools.product(WORDS, repeat=n):
            seqs = [list(words) + [V.sep_id]] if n < max_len else [list(words)]
            for seq in seqs:
                lp = 0.0
                for i, tok in enumerate(seq):
                    lp += forbid(scorer.dist(seq[:i]))[tok]
                body = seq[:-1] if seq and seq[-1] == V.sep_id else seq
                if all(contains_subsequence(body, c) for c in constraints) and lp > best_lp:
                    best, best_lp = body, lp
    return best, best_lp


def test_greedy_always_sep_gives_empty():
    res = greedy_search(ScriptedScorer([]), V, max_len=20)
    assert res.token_ids == [] and res.token_logprobs == []
    assert res.logprob == pytest.approx(math.log(0.9))


def test_greedy_scripted_sequence():
    w1, w2 = WORDS[0], WORDS[2]
    res = greedy_search(ScriptedScorer([w1, w2]), V, max_len=20)
    assert res.token_ids == [w1, w2]
    assert res.token_logprobs == pytest.approx([math.log(0.9)] * 2)


def test_greedy_never_sep_stops_at_max_len():
    res = greedy_search(ScriptedScorer([WORDS[1]] * 50), V, max_len=7)
    assert res.token_ids == [WORDS[1]] * 7


def test_greedy_never_emits_specials():
    class Bad:
        def __call__(self, prefixes):
            row = np.full(V.size, -50.0)
            row[V.mask_id] = 0.0
            row[V.cls_id] = -0.1
            row[WORDS[3]] = -1.0
            return np.array([row] * len(prefixes))

    assert greedy_search(Bad(), V, max_len=3).token_ids == [WORDS[3]] * 3


def test_fsm_empty_constraints():
    fsm = build_fsm([])
    assert fsm.n_states == 1 and fsm.is_accepting(0)
    assert fsm.step(0, 5) == 0


def test_fsm_single_token():
    fsm = build_fsm([[7]])
    assert fsm.n_states == 2
    assert not fsm.is_accepting(0)
    s = fsm.step(0, 7)
    assert fsm.is_accepting(s) and fsm.step(s, 3) == s
    assert fsm.step(0, 3) == 0


def test_fsm_rejects_empty_constraint():
    with pytest.raises(EmptyConstraint):
        build_fsm([[1], []])


def brute_state(seq, constraints):
    out = []
    for c in constraints:
        if contains_subsequence(seq, c):
            out.append(-1)
            continue
        k = max(k for k in range(len(c)) if k == 0 or list(seq[len(seq) - k:]) == list(c[:k]))
        out.append(k)
    return tuple(out)


def brute_automaton(constraints, alphabet, depth=8):
    """Subset construction by exhaustive string enumeration."""
    states = set()
    for n in range(depth + 1):
        for seq in itertools.product(alphabet, repeat=n):
            states.add(brute_state(seq, constraints))
    return states


@pytest.mark.parametrize("constraints", [
    [[1, 2], [2, 3]],
    [[1, 1, 2]],
    [[1, 2, 1, 2, 3]],
    [[1], [2, 3], [3, 1]],
    [[2, 2], [2, 2, 2]],
])
def test_fsm_matches_brute_force_oracle(constraints):
    alphabet = [1, 2, 3, 9]  # 9 is outside every constraint
    fsm = build_fsm(constraints)
    assert set(fsm.states) == brute_automaton(constraints, alphabet)
    for n in range(7):
        for seq in itertools.product(alphabet, repeat=n):
            s = fsm.run(seq)
            assert fsm.states[s] == brute_state(seq, constraints)
            want = all(contains_subsequence(seq, c) for c in constraints)
            assert fsm.is_accepting(s) == want
    table = fsm.table(12)
    assert table.shape == (fsm.n_states, 12)
    for s in range(fsm.n_states):
        for t in range(12):
            assert table[s, t] == fsm.step(s, t)


def test_cbs_zero_constraints_beam_one_equals_greedy():
    for seed in range(20):
        sc = TableScorer(seed)
        g = greedy_search(sc, V, max_len=6)
        c = constrained_beam_search(sc, V, build_fsm([]), beam_width=1, max_len=6)
        assert c.token_ids == g.token_ids
        assert c.logprob == pytest.approx(g.logprob, abs=1e-12)


@pytest.mark.parametrize("beam", [1, 2, 3, 5])
def test_cbs_no_constraints_never_worse_than_greedy(beam):
    for seed in range(20):
        sc = TableScorer(seed, sep_bias=-1.0)
        g = greedy_search(sc, V, max_len=6)
        c = constrained_beam_search(sc, V, build_fsm([]), beam_width=beam, max_len=6)
        assert c.logprob >= g.logprob - 1e-12


def test_cbs_low_probability_constraint():
    sc = TableScorer(3)
    rare = min(WORDS, key=lambda t: sc.dist([])[t])
    fsm = build_fsm([[rare]])
    res = constrained_beam_search(sc, V, fsm, beam_width=5, max_len=4)
    assert rare in res.token_ids and res.accepted
    best, best_lp = exhaustive_best(sc, [[rare]], 4)
    assert res.token_ids == best
    assert res.logprob == pytest.approx(best_lp, abs=1e-12)


def test_cbs_two_disjoint_constraints():
    sc = TableScorer(8)
    cons = [[WORDS[0]], [WORDS[3]]]
    res = constrained_beam_search(sc, V, build_fsm(cons), beam_width=5, max_len=4)
    best, best_lp = exhaustive_best(sc, cons, 4)
    assert res.token_ids == best and res.logprob == pytest.approx(best_lp, abs=1e-12)
    assert all(contains_subsequence(res.token_ids, c) for c in cons)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000),
       st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=2), min_size=0, max_size=2))
def test_cbs_matches_exhaustive_oracle(seed, constraints):
    sc = TableScorer(seed, sep_bias=-0.5)
    max_len = 4
    best, best_lp = exhaustive_best(sc, constraints, max_len)
    res = constrained_beam_search(sc, V, build_fsm(constraints), beam_width=64, max_len=max_len)
    if best is None:
        assert not res.accepted
        return
    assert res.accepted
    assert res.token_ids == best
    assert res.logprob == pytest.approx(best_lp, abs=1e-9)


def test_cbs_infeasible_falls_back_to_most_satisfied():
    cons = [[WORDS[0]], [WORDS[1]], [WORDS[2]]]
    res = constrained_beam_search(TableScorer(1), V, build_fsm(cons), beam_width=3, max_len=2)
    assert not res.accepted
    assert bin(res.satisfied).count("1") == 2


def test_cbs_invalid_beam():
    with pytest.raises(ValueError):
        constrained_beam_search(TableScorer(0), V, build_fsm([]), beam_width=0)


def test_no_hypothesis_error_type():
    assert issubclass(NoHypothesis, Exception)


# ---------------------------------------------------------------- with the encoder


@pytest.fixture
def model():
    v = Vocabulary.from_words(["a", "photo", "of", "dog", "cat", "bird"])
    return v, tiny_params(v, seed=2, std=0.5), BatchConfig(d_app=4)


def test_prefix_stability(model):
    v, p, bc = model
    blocks = build_tag_blocks(["dog", "cat"], v)
    regs = random_regions(np.random.default_rng(0), 2)
    prefix = [v.id("a"), v.id("photo"), v.id("of")]
    logits = {}
    for n in range(len(prefix) + 1):
        b = build_infer_batch([v.cls_id, *prefix[:n], v.mask_id], blocks, regs, bc, v)
        fr = encoder.forward(p, b)
        for pos in range(n + 1):
            row = fr.logits_at(pos)
            if pos in logits:
                assert np.abs(logits[pos] - row).max() < 1e-12
            logits.setdefault(pos, row)


def test_encoder_greedy_and_cbs(model):
    v, p, bc = model
    blocks = build_tag_blocks(["dog", "cat"], v)
    regs = random_regions(np.random.default_rng(1), 2)
    g = greedy_decode(p, blocks, regs, v, bc, max_len=5)
    assert g == greedy_decode(p, blocks, regs, v, bc, max_len=5)
    assert len(g) <= 5
    assert cbs_decode(p, blocks, regs, v, bc, build_fsm([]), beam_width=1, max_len=5) == g
    out = cbs_decode(p, blocks, regs, v, bc, build_fsm([[v.id("bird")]]), beam_width=3, max_len=5)
    assert v.id("bird") in out
    scorer = EncoderScorer(p, blocks, regs, v, bc)
    row = scorer([[]])[0]
    assert np.exp(row).sum() == pytest.approx(1.0)
