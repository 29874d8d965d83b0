import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vivo.config import BatchConfig
from vivo.data import ImageTagRecord, RegionRecord
from vivo.probe import (
    ClassInfo, align, cosine_matrix, export_embeddings, mention_f1, mentioned_classes, ranking_auc,
    read_embeddings,
)
from vivo.tokenizer import Vocabulary

from conftest import random_regions, tiny_params

BC = BatchConfig(d_app=4)


@pytest.fixture
def model():
    v = Vocabulary.from_words(["dog", "cat", "accord", "##ion", "bird"])
    return v, tiny_params(v, seed=4, std=0.4)


def test_duplicated_region_scores_identically(model):
    v, p = model
    r = random_regions(np.random.default_rng(0), 2)
    regs = [r[0], r[1], r[0]]
    scores = align(p, ["dog", "cat", "accordion"], regs, v, BC)
    by = {(s.region_index, s.tag): s.cosine for s in scores}
    for tag in ("dog", "cat", "accordion"):
        assert by[(0, tag)] == pytest.approx(by[(2, tag)], abs=1e-12)
    assert all(-1.0 <= s.cosine <= 1.0 for s in scores)
    assert len(scores) == 9


def test_cosine_matrix_bounds_and_self_similarity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 7)) * 1e3
    sim = cosine_matrix(a, a)
    np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-12)
    assert np.abs(sim).max() <= 1.0
    np.testing.assert_allclose(cosine_matrix(a, -a).diagonal(), -1.0, atol=1e-12)


def test_region_order_does_not_change_scores(model):
    v, p = model
    regs = random_regions(np.random.default_rng(2), 3)
    a = {(s.region_index, s.tag): s.cosine for s in align(p, ["dog", "bird"], regs, v, BC)}
    perm = [2, 0, 1]
    b = {(s.region_index, s.tag): s.cosine for s in align(p, ["dog", "bird"], [regs[i] for i in perm], v, BC)}
    for new_k, old_k in enumerate(perm):
        for tag in ("dog", "bird"):
            assert b[(new_k, tag)] == pytest.approx(a[(old_k, tag)], abs=1e-12)


def test_first_pooling_and_bad_pooling(model):
    v, p = model
    regs = random_regions(np.random.default_rng(3), 1)
    mean = align(p, ["accordion"], regs, v, BC)[0].cosine
    first = align(p, ["accordion"], regs, v, BC, pooling="first")[0].cosine
    assert mean != first
    with pytest.raises(ValueError):
        align(p, ["dog"], regs, v, BC, pooling="max")


def brute_auc(pos, neg):
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def test_ranking_auc_examples():
    assert ranking_auc([3, 4], [1, 2]) == 1.0
    assert ranking_auc([1, 2], [3, 4]) == 0.0
    assert ranking_auc([1], [1]) == 0.5
    assert math.isnan(ranking_auc([], [1]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.lists(st.integers(-3, 3), min_size=1, max_size=12))
def test_ranking_auc_matches_pair_count(pos, neg):
    assert ranking_auc(pos, neg) == pytest.approx(brute_auc(pos, neg), abs=1e-12)


def record(rid, tags, n_regions, seed):
    rng = np.random.default_rng(seed)
    regions = tuple(RegionRecord(tuple(rng.normal(size=4).round(4)), (10.0 * k, 0.0, 10.0 * k + 5, 8.0),
                                 tags[k % len(tags)] if k < 2 else None) for k in range(n_regions))
    return ImageTagRecord(rid, tuple(tags), regions, (100.0, 50.0))


def test_export_counts_and_bytes(model, tmp_path):
    v, p = model
    recs = [record("a", ["dog", "accordion"], 3, 0), record("b", ["cat"], 1, 1)]
    path = tmp_path / "e.tsv"
    n = export_embeddings(p, recs, v, BC, path)
    assert n == 3 + 2 + 1 + 1
    rows = read_embeddings(str(path))
    assert [r[0] for r in rows] == ["a/r0", "a/r1", "a/r2", "a/t0", "a/t1", "b/r0", "b/t0"]
    assert [r[1] for r in rows].count("REGION") == 4
    assert rows[2][2] == "-" and rows[4][2] == "accordion"
    assert all(r[3].shape == (p.config.hidden,) for r in rows)
    header = path.read_text().splitlines()[0]
    assert header.startswith("#id\tmodality\tlabel\th0")
    again = tmp_path / "f.tsv"
    export_embeddings(p, recs, v, BC, again)
    assert path.read_bytes() == again.read_bytes()


def test_export_empty(model, tmp_path):
    v, p = model
    path = tmp_path / "e.tsv"
    assert export_embeddings(p, [], v, BC, path) == 0
    assert len(path.read_text().splitlines()) == 1


def test_mention_f1_hand_computed():
    classes = ["dog", "cat", ClassInfo("accordion", ("squeezebox",)), "tree"]
    captions = ["a dog next to a cat", "a photo of a squeezebox", "there is a dogs and a tree"]
    truth = [["dog"], ["accordion", "tree"], ["dog", "tree"]]
    # image 1: tp dog, fp cat; image 2: tp accordion, fn tree; image 3: tp tree, fn dog ("dogs" is not "dog")
    m = mention_f1(captions, truth, classes)
    assert (m.tp, m.fp, m.fn) == (3, 1, 2)
    assert m.precision == pytest.approx(3 / 4)
    assert m.recall == pytest.approx(3 / 5)
    assert m.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert m.per_class["dog"] == {"tp": 1, "fp": 0, "fn": 1}


def test_mention_word_boundaries():
    cls = [ClassInfo("cat"), ClassInfo("hot dog")]
    assert mentioned_classes("a Cat.", cls) == {"cat"}
    assert mentioned_classes("concatenate", cls) == set()
    assert mentioned_classes("a hot  dog here", cls) == {"hot dog"}
    assert mentioned_classes("a hotdog", cls) == set()


def test_mention_f1_ignores_unlisted_classes_and_handles_empty():
    m = mention_f1(["a zebra"], [["zebra"]], ["dog"])
    assert (m.tp, m.fp, m.fn) == (0, 0, 0) and m.f1 == 0.0
    m = mention_f1([], [], ["dog"])
    assert m.precision == m.recall == m.f1 == 0.0


def test_mention_f1_dict_classes():
    m = mention_f1(["a pup"], [["dog"]], [{"name": "Dog", "synonyms": ["Pup"]}])
    assert m.tp == 1 and m.f1 == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sets(st.sampled_from(["dog", "cat", "tree", "cup"])), min_size=1, max_size=6),
       st.integers(0, 1000))
def test_adding_a_true_mention_never_lowers_recall(truths, seed):
    rng = np.random.default_rng(seed)
    classes = ["dog", "cat", "tree", "cup"]
    captions = [" ".join(c for c in classes if rng.random() < 0.5) for _ in truths]
    base = mention_f1(captions, truths, classes)
    i = int(rng.integers(len(truths)))
    missing = sorted(set(truths[i]) - mentioned_classes(captions[i], [ClassInfo(c) for c in classes]))
    if not missing:
        return
    better = list(captions)
    better[i] = better[i] + " " + missing[0]
    after = mention_f1(better, truths, classes)
    assert after.recall > base.recall
    assert after.precision >= base.precision
    assert 0.0 <= after.f1 <= 1.0
