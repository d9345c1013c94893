import json
import math

import numpy as np
import pytest

from hve import io
from hve.errors import ConfigError, FormatError, GenerationError
from hve.synth import SynthSpec, generate, nearest_centroid_accuracy, separated_centres, verify

SMALL_DIMS = dict(d_text=64, d_image=48, d_o=16)


def within_chance(score, n_rel, n_inst):
    p = 1.0 / n_rel
    return abs(score - p) <= 3 * math.sqrt(p * (1 - p) / n_inst)


@pytest.fixture(scope="module")
def image_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("img")
    report = generate(SynthSpec(num_relations=10, instances_per_relation=20, signal="image", seed=2), out)
    return out, report["all"]


def test_image_signal_oracle(image_data):
    _, rep = image_data
    assert rep["image"] == 1.0
    assert within_chance(rep["text"], 10, 200)
    assert within_chance(rep["objects"], 10, 200)


def test_objects_signal_oracle(tmp_path):
    rep = generate(SynthSpec(num_relations=10, instances_per_relation=20, signal="objects", seed=2, **SMALL_DIMS),
                   tmp_path)["all"]
    assert rep["objects"] >= 0.95
    assert within_chance(rep["image"], 10, 200) and within_chance(rep["text"], 10, 200)


def test_text_signal_oracle(tmp_path):
    rep = generate(SynthSpec(num_relations=6, instances_per_relation=10, signal="text", seed=4, **SMALL_DIMS),
                   tmp_path)["all"]
    assert rep["text"] == 1.0


def test_generation_is_byte_identical(tmp_path):
    spec = dict(num_relations=5, instances_per_relation=6, signal="image+objects", seed=9,
                splits={"train": 3, "test": 2}, **SMALL_DIMS)
    generate(SynthSpec(**spec), tmp_path / "a")
    generate(SynthSpec(**spec), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["glove.txt", "images.bank", "oracle.json", "spec.json", "test.jsonl", "tokens.bank",
                     "train.jsonl"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_files_load_through_io(image_data):
    out, _ = image_data
    ds = io.open_dataset(out / "all.jsonl")
    table = io.load_glove(out / "glove.txt")
    assert len(ds) == 200 and len(ds.relations) == 10
    assert ds.tokens_bank.shape == (200 * 8, 768) and ds.image_bank.shape == (200, 512)
    assert table.dim == 50 and all(all(table.get(o) is not None for o in i.objects) for i in ds.instances)


def test_splits_are_disjoint(tmp_path):
    generate(SynthSpec(num_relations=6, instances_per_relation=4, seed=1, splits={"train": 4, "test": 2},
                       **SMALL_DIMS), tmp_path)
    train = io.open_dataset(tmp_path / "train.jsonl")
    test = io.open_dataset(tmp_path / "test.jsonl")
    assert len(train.relations) == 4 and len(test.relations) == 2
    assert not set(train.relations) & set(test.relations)


def test_centres_are_separated():
    c = separated_centres(np.random.default_rng(0), 30, 512, 0.3)
    cos = c @ c.T
    assert np.allclose(np.diag(cos), 1.0) and np.max(cos - np.eye(30) * 2) < 0.3


def test_centre_failure_suggests_fewer_relations():
    with pytest.raises(GenerationError, match="fewer relations"):
        separated_centres(np.random.default_rng(0), 20, 2, 0.3)


def test_preferred_label_rate(tmp_path):
    generate(SynthSpec(num_relations=4, instances_per_relation=200, signal="objects", seed=3, **SMALL_DIMS),
             tmp_path)
    ds = io.open_dataset(tmp_path / "all.jsonl")
    vocab_pref = {f"rel{r:03d}": {f"obj{2 * r:03d}", f"obj{2 * r + 1:03d}"} for r in range(4)}
    hits = [o in vocab_pref[i.relation] for i in ds.instances for o in i.objects]
    assert abs(np.mean(hits) - 0.9) < 0.03


def test_mixed_channel_weights():
    t, i, o = SynthSpec(signal="mixed", mixed_p=0.5).channel_weights()
    assert t == pytest.approx(math.sqrt(0.5)) and i == pytest.approx(math.sqrt(0.5)) and o == pytest.approx(0.45)
    assert SynthSpec(signal="image+objects").channel_weights() == (0.0, 1.0, 0.9)


def test_spec_validation_lists_everything(tmp_path):
    with pytest.raises(ConfigError) as exc:
        SynthSpec.from_dict({"num_relations": 1, "signal": "sound", "bogus": 3})
    text = str(exc.value)
    assert "bogus" in text and "num_relations" in text and "signal" in text
    (tmp_path / "s.json").write_text(json.dumps({"num_relations": 3, "splits": {"a": 2}}))
    with pytest.raises(ConfigError, match="splits"):
        SynthSpec.load(tmp_path / "s.json")


def test_nearest_centroid_oracle_basics():
    feats = np.array([[0.0], [0.1], [5.0], [5.1]])
    assert nearest_centroid_accuracy(feats, ["a", "a", "b", "b"]) == 1.0
    assert nearest_centroid_accuracy(feats, ["a", "b", "a", "b"]) == 0.0


def test_verify_rejects_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    (tmp_path / "g.txt").write_text("a 1\n")
    with pytest.raises(FormatError):
        verify(tmp_path / "m.jsonl", tmp_path / "g.txt")
