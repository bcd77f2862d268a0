import json

import numpy as np
import pytest

from conftest import ANNOTATION, DATASET, FIXTURES, random_gallery
from icr_policies.corpus import (
    CorpusError,
    GameRecord,
    IcrAnnotation,
    RawTurn,
    build_turn_records,
    dataset_statistics,
    expand_ambiguity_labels,
    game_galleries,
    load_dialogues,
    load_icr_annotation,
    read_records,
    split_of,
    write_records,
)
from icr_policies.fixtures import make_fixture_corpus
from icr_policies.game_state import serialize_scene


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_split_of():
    assert split_of("train_00001") == "train"
    assert split_of("test_7") == "test"
    with pytest.raises(CorpusError):
        split_of("dev_1")


def test_load_fixture_dialogues(games):
    assert len(games) == 40
    assert {g.split for g in games} == {"train", "val", "test"}
    assert all(len(g.gallery_spec) == 28 for g in games)


def test_empty_dataset_gives_no_games(tmp_path):
    assert load_dialogues(_write(tmp_path, "d.json", "")) == []


def test_malformed_dataset_errors_name_the_game(tmp_path):
    doc = {"data": {"train_1": {"dialog": [{"msg_d": "hi"}]}}}
    with pytest.raises(CorpusError, match="train_1"):
        load_dialogues(_write(tmp_path, "d.json", json.dumps(doc)))
    with pytest.raises(CorpusError, match="line"):
        load_dialogues(_write(tmp_path, "e.json", "{\n\"data\": [}"))
    with pytest.raises(CorpusError):
        load_dialogues(tmp_path / "missing.json")


def test_annotation_loading(annotations):
    icr = [a for a in annotations if a.is_icr]
    assert icr and all(a.mentioned_cliparts or a.ambiguity_classes for a in icr)
    general = [a for a in icr if a.ambiguity_classes == {"general"}]
    assert all(a.has_unresolved_reference for a in general)


def test_annotation_errors(tmp_path):
    with pytest.raises(CorpusError, match="header"):
        load_icr_annotation(_write(tmp_path, "a.tsv", "foo\tbar\n"))
    dup = "game_id\tturn_index\tis_icr\tcliparts\ntrain_1\t0\t1\t3\ntrain_1\t0\t0\t\n"
    with pytest.raises(CorpusError, match=":3: duplicate"):
        load_icr_annotation(_write(tmp_path, "b.tsv", dup))
    bad = "game_id\tturn_index\tis_icr\tcliparts\ntrain_1\t0\tmaybe\t\n"
    with pytest.raises(CorpusError, match="boolean"):
        load_icr_annotation(_write(tmp_path, "c.tsv", bad))
    unknown = "game_id\tturn_index\tis_icr\tcliparts\ntrain_1\t0\t1\tunicorn\n"
    with pytest.raises(CorpusError, match="unicorn"):
        load_icr_annotation(_write(tmp_path, "d.tsv", unknown))


def test_annotation_header_aliases(tmp_path):
    text = "Game_Name\tTurn\tIs_CR\tMentioned_Cliparts\ntrain_1\t2\tyes\t3;hat_group\n"
    (ann,) = load_icr_annotation(_write(tmp_path, "a.tsv", text))
    assert ann == IcrAnnotation("train_1", 2, True, frozenset({3}), frozenset({"hat_group"}), False)


def test_expand_ambiguity_labels():
    g = random_gallery(np.random.default_rng(0))
    hats = {i for i in g.ids if 32 <= i <= 37}
    ann = IcrAnnotation("x", 0, True, frozenset(), frozenset({"hat_group", "general"}))
    assert expand_ambiguity_labels(ann, g) == hats
    assert expand_ambiguity_labels(IcrAnnotation("x", 0, True, frozenset(), frozenset({"general"})), g) == set()
    with pytest.raises(ValueError):
        expand_ambiguity_labels(IcrAnnotation("x", 0, True, frozenset(), frozenset({"bogus_group"})), g)
    outside = next(i for i in range(58) if i not in g.ids)
    with pytest.raises(ValueError):
        expand_ambiguity_labels(IcrAnnotation("x", 0, True, frozenset({outside})), g)


def _game(scenes):
    g = random_gallery(np.random.default_rng(1))
    spec = g.spec
    turns = tuple(RawTurn(f"ig {k}", f"if {k}", s) for k, s in enumerate(scenes))
    return GameRecord("train_9", "train", turns, spec), g


def test_missing_scene_keeps_previous_state():
    g = random_gallery(np.random.default_rng(1))
    game, _ = _game([serialize_scene(g), None, serialize_scene(g)])
    states = game_galleries(game)
    assert len(states) == 4
    assert states[2] == states[1] == g


def test_build_turn_records_when_and_what(when_records, what_records, annotations):
    n_turns = sum(1 for _ in annotations)
    assert len(when_records) == n_turns
    assert all(r.is_icr for r in what_records)
    resolvable = [a for a in annotations if a.is_icr and not a.has_unresolved_reference]
    assert len(what_records) == len(resolvable)
    for r in what_records:
        assert r.task == "what" and len(r.icr_cliparts) == 28
    # actions of record t diff the states before and after turn t
    r = when_records[0]
    assert r.turn_index == 0 and not any(c.present for c in r.gallery_before)


def test_annotation_for_missing_turn_is_rejected(games):
    ann = [IcrAnnotation(games[0].game_id, 999, True)]
    with pytest.raises(CorpusError, match="nonexistent"):
        build_turn_records(games, ann, "when")
    with pytest.raises(ValueError):
        build_turn_records(games, [], "why")


def test_statistics_match_golden_file(when_records, what_records):
    golden = json.loads((FIXTURES / "golden_statistics.json").read_text())
    assert dataset_statistics(when_records + what_records) == golden


def test_statistics_hand_computed(when_records):
    stats = dataset_statistics(when_records)
    train = [r for r in when_records if r.split == "train"]
    assert stats["train"]["when"] == round(100 * sum(r.is_icr for r in train) / len(train), 2)


def test_records_round_trip_and_byte_identical(tmp_path, when_records, what_records):
    for recs in (when_records, what_records):
        a, b = tmp_path / "a.gz", tmp_path / "b.gz"
        write_records(a, recs)
        write_records(b, recs)
        assert a.read_bytes() == b.read_bytes()
        back = read_records(a)
        assert len(back) == len(recs)
        for x, y in zip(back, recs):
            assert (x.game_id, x.turn_index, x.is_icr, x.icr_cliparts) == (y.game_id, y.turn_index, y.is_icr,
                                                                          y.icr_cliparts)
            assert x.gallery_before == y.gallery_before and x.gallery_after == y.gallery_after
            assert x.actions == y.actions
            assert [t.ig_utterance for t in x.dialogue] == [t.ig_utterance for t in y.dialogue]


def test_fixture_generator_is_deterministic():
    assert make_fixture_corpus(seed=0) == make_fixture_corpus(seed=0)
    doc, rows = make_fixture_corpus(seed=0)
    assert json.loads(DATASET.read_text()) == doc
    assert len(ANNOTATION.read_text().splitlines()) == len(rows) + 1
