import json

import pytest

from embedmask.config import RunConfig, parse_override


def test_roundtrip(tmp_path):
    run = RunConfig(seed=5, train_count=100)
    run.train.lr = 0.02
    path = tmp_path / "run.json"
    run.save(path)
    back = RunConfig.load(path)
    assert back.seed == 5
    assert back.train.lr == 0.02
    assert back.train_count == 100
    assert back.hash() == run.hash()


def test_hash_sensitivity():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash()
    b.train.lr = 0.123
    assert a.hash() != b.hash()


def test_overrides():
    run = RunConfig()
    out = run.apply_overrides({"train.lr": 0.5, "seed": 9,
                               "scenes.max_instances": 2})
    assert out.train.lr == 0.5 and out.seed == 9
    assert out.scenes.max_instances == 2
    assert run.train.lr == 0.01  # original untouched


def test_override_unknown_field_names_it():
    with pytest.raises(ValueError, match="train.nope"):
        RunConfig().apply_overrides({"train.nope": 1})


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="mystery"):
        RunConfig.from_dict({"mystery": 1})


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValueError, match="invalid JSON"):
        RunConfig.load(p)


def test_parse_override():
    assert parse_override("train.lr=0.5") == ("train.lr", 0.5)
    assert parse_override("train.margin_mode=fixed_hinge") == \
        ("train.margin_mode", "fixed_hinge")
    assert parse_override("scenes.occlusion=false") == ("scenes.occlusion", False)
    with pytest.raises(ValueError, match="key=value"):
        parse_override("no-equals-sign")
