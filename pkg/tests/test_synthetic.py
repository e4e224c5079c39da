import pytest

from sceneforge.data import read_manifest
from sceneforge.synthetic import SyntheticSpec, SyntheticSpecError, SyntheticTruth, generate_synthetic_dataset, oracle_f1


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixed_seed_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_videos=20, n_heldout_videos=3)
    generate_synthetic_dataset(spec, tmp_path / "a")
    generate_synthetic_dataset(spec, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_synthetic_dataset(SyntheticSpec(n_videos=10, seed=0), tmp_path / "a")
    generate_synthetic_dataset(SyntheticSpec(n_videos=10, seed=1), tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") != _tree_bytes(tmp_path / "b")


def test_corpus_shape(tmp_path):
    truth = generate_synthetic_dataset(SyntheticSpec(n_videos=50), tmp_path)
    header, records = read_manifest(tmp_path / "manifest.jsonl")
    assert len(header.hierarchy.level1) == 3 and len(header.hierarchy.level2) == 12
    assert all(1 <= len(r.label_paths) <= 2 for r in records)
    assert all(len(r.keywords) <= header.max_keywords for r in records)
    assert truth.heldout["name"] not in header.hierarchy.level2
    _, held = read_manifest(tmp_path / "heldout.jsonl")
    assert len(held) == 40 and all(r.label_paths == [("P0", "P0_new")] for r in held)
    assert SyntheticTruth.load(tmp_path / "truth.json").level2 == truth.level2


def test_noise_free_oracle_is_perfect(tmp_path):
    truth = generate_synthetic_dataset(SyntheticSpec(n_videos=80, noise=0.0, n_heldout_videos=0), tmp_path)
    _, records = read_manifest(tmp_path / "manifest.jsonl")
    assert oracle_f1(records, truth) == 1.0


def test_noisy_oracle_is_high_but_finite(tmp_path):
    truth = generate_synthetic_dataset(SyntheticSpec(n_videos=120, n_heldout_videos=0), tmp_path)
    _, records = read_manifest(tmp_path / "manifest.jsonl")
    assert 0.9 <= oracle_f1(records, truth) <= 1.0


@pytest.mark.parametrize("field,value", [("n_videos", 0), ("n_parents", 0), ("children_per_parent", 0), ("noise", -1.0)])
def test_invalid_generator_settings(tmp_path, field, value):
    with pytest.raises(SyntheticSpecError):
        generate_synthetic_dataset(SyntheticSpec(**{field: value}), tmp_path)
