import pytest

from safemerge.data import DatasetError, ModArithSpec
from safemerge.pipeline import (
    ToyData,
    ToyTrainConfig,
    eval_sets,
    make_toy_data,
    safety_mix,
    substream,
)


def test_substreams_are_named_and_stable():
    assert substream(0, "a") == substream(0, "a")
    assert len({substream(0, "a"), substream(0, "b"), substream(1, "a")}) == 3
    assert 0 <= substream(123, "x") < 2**63


def test_toy_data_split(tmp_path):
    data = make_toy_data(2, 300)
    held = set(data.heldout.questions())
    assert len(data.heldout_safety) == len(data.heldout_expert) == 30
    assert not held & set(data.train_aligned.questions())
    assert not held & set(data.train_expert.questions())
    assert data.train_aligned.questions() == data.train_misaligned.questions()
    data.write(tmp_path)
    assert ToyData.read(tmp_path) == data
    assert make_toy_data(2, 300) == data


def test_toy_data_rejects_tiny_k():
    with pytest.raises(ValueError):
        make_toy_data(0, 5)


def test_safety_mix_share():
    data = make_toy_data(0, 1000)
    mix = safety_mix(data, 0.75, 0)
    share = sum(p.answer[0] == 3 for p in mix) / len(mix)
    assert abs(share - 0.75) < 0.05
    assert all(p.answer[0] == 2 for p in safety_mix(data, 0.0, 0))
    assert mix.questions() == data.train_aligned.questions()
    with pytest.raises(ValueError):
        ToyTrainConfig(misaligned_share=1.5)


def test_eval_sets_shape():
    data = make_toy_data(1, 200)
    prompts, items = eval_sets(data, 1)
    assert len(prompts) == len(items) == 20
    assert all(len(it.candidates) == 4 for it in items)


def test_domain_tag_round_trip():
    spec = ModArithSpec(modulus=7, op="*")
    assert ModArithSpec.from_domain(spec.domain) == ModArithSpec(modulus=7, op="*")
    with pytest.raises(DatasetError):
        ModArithSpec.from_domain("forbidden")
