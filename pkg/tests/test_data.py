import json

import pytest

from vivo.data import WorldSpec, generate_world, parse_record, read_records, write_records
from vivo.errors import DataError, VivoIOError
from vivo.tokenizer import normalize, tokenize


def good(**kw):
    raw = {"id": "x", "tags": ["dog"], "image_size": [100, 80],
           "regions": [{"appearance": [0.1, 0.2], "box": [0, 0, 50, 40], "label": "dog"}]}
    raw.update(kw)
    return raw


def test_parse_valid():
    r = parse_record(good(), 0)
    assert r.tags == ("dog",) and r.regions[0].label == "dog"
    objs = r.region_objects()
    assert objs[0].box == pytest.approx((0.0, 0.0, 0.5, 0.5, 0.5, 0.5))  # corners, width, height


@pytest.mark.parametrize("bad, needle", [
    (good(tags=[]), "tags"),
    (good(tags=["", "dog"]), "tags"),
    (good(image_size=[0, 10]), "image_size"),
    (good(regions=[{"appearance": [1.0], "box": [0, 0, 200, 10]}]), "outside"),
    (good(regions=[{"appearance": [1.0], "box": [0, 0, 1]}]), "4 pixel"),
    (good(regions=[{"appearance": [1.0], "box": [0, 0, 1, 1]}, {"appearance": [1.0, 2.0], "box": [0, 0, 1, 1]}]),
     "lengths differ"),
    (good(caption=""), "caption"),
    ({"tags": ["dog"]}, "missing"),
    ([1, 2], "JSON object"),
])
def test_parse_rejects(bad, needle):
    with pytest.raises(DataError, match=needle) as info:
        parse_record(bad, 7)
    assert "record 7" in str(info.value)
    assert info.value.exit_code == 3


def test_caption_required_and_d_app():
    with pytest.raises(DataError, match="caption is required"):
        parse_record(good(), 0, need_caption=True)
    with pytest.raises(DataError, match="d_app"):
        parse_record(good(), 0, d_app=3)


def test_read_records_indexes_and_missing_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(good()) + "\n\n" + json.dumps(good(id="y")) + "\n{oops\n")
    with pytest.raises(DataError, match="record 2"):
        read_records(str(path))
    with pytest.raises(VivoIOError, match="nope.jsonl"):
        read_records(str(tmp_path / "nope.jsonl"))


def test_roundtrip(tmp_path):
    world = generate_world(WorldSpec(n_pretrain=5, n_finetune=5, n_test=2, seed=1))
    path = tmp_path / "ft.jsonl"
    write_records(str(path), world.finetune)
    assert read_records(str(path), need_caption=True) == world.finetune


def test_world_holds_out_novel_classes():
    world = generate_world(WorldSpec(n_classes=12, n_novel=2, n_pretrain=200, n_finetune=150, n_test=10, seed=5))
    assert len(world.classes) == 12 and len(world.novel) == 2
    tagged = {t for r in world.pretrain for t in r.tags}
    assert set(world.novel) <= tagged
    for r in world.finetune:
        words = set(normalize(r.caption).split())
        assert not set(t for n in world.novel for t in n.split()) & words
        assert not set(world.novel) & set(r.tags)
    for r in world.test:
        assert len(set(r.tags) & set(world.novel)) == 1
        for tag in r.tags:
            assert tag in r.caption
    for rec in world.pretrain + world.finetune + world.test:
        for text in (*rec.tags, rec.caption or "a"):
            assert tokenize(text, world.vocab)  # raises on pieces outside the vocabulary


def test_world_is_deterministic():
    a = generate_world(WorldSpec(n_pretrain=20, n_finetune=10, n_test=4, seed=9))
    b = generate_world(WorldSpec(n_pretrain=20, n_finetune=10, n_test=4, seed=9))
    c = generate_world(WorldSpec(n_pretrain=20, n_finetune=10, n_test=4, seed=10))
    assert a.pretrain == b.pretrain and a.finetune == b.finetune and a.test == b.test
    assert a.classes == b.classes
    assert a.pretrain != c.pretrain


def test_world_spec_validation():
    with pytest.raises(DataError):
        WorldSpec(n_classes=0)
    with pytest.raises(DataError):
        WorldSpec(n_classes=3, n_novel=3)
    with pytest.raises(DataError):
        WorldSpec(n_classes=4, n_novel=2, max_objects=3)
