import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fusefill.datasets import (SEEN, UNSEEN, DatasetError, EpisodeError, SplitSpec, load_dataset,
                               sample_coefficients, sample_episode, split_categories)


def _write_tree(root, counts, size=6):
    rng = np.random.default_rng(0)
    for i, n in enumerate(counts):
        d = root / f"cat{i:02d}"
        d.mkdir(parents=True)
        for j in range(n):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{j}.png")
    return root


def test_ratio_split_counts(tmp_path):
    ds = load_dataset(_write_tree(tmp_path, [3] * 10), SplitSpec(seed=7, ratio=0.8), image_size=4)
    assert len(ds.seen) == 8 and len(ds.unseen) == 2


def test_split_is_deterministic_and_a_partition():
    cats = [f"c{i}" for i in range(17)]
    a = split_categories(cats, SplitSpec(seed=7, ratio=0.7))
    b = split_categories(cats, SplitSpec(seed=7, ratio=0.7))
    assert a == b
    assert set(a) == set(cats)
    assert split_categories(cats, SplitSpec(seed=8, ratio=0.7)) != a


def test_split_file_round_trip(tmp_path):
    spec = SplitSpec(seen=("a", "b"), unseen=("c",))
    spec.write(tmp_path / "split.txt")
    back = SplitSpec.from_file(tmp_path / "split.txt")
    assert split_categories(["a", "b", "c"], back) == {"a": SEEN, "b": SEEN, "c": UNSEEN}


def test_split_rejects_overlap():
    with pytest.raises(DatasetError):
        split_categories(["a", "b"], SplitSpec(seen=("a",), unseen=("a", "b")))


def test_images_normalized_and_resized(tmp_path):
    ds = load_dataset(_write_tree(tmp_path, [2, 2]), SplitSpec(ratio=0.5), image_size=4, channels=3)
    x = ds.images["cat00"]
    assert x.shape == (2, 3, 4, 4) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1
    assert ds.image_shape == (4, 4, 3)


def test_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")


def test_empty_category(tmp_path):
    _write_tree(tmp_path, [2])
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path)


def test_undecodable_file_skipped_then_fails_when_empty(tmp_path):
    _write_tree(tmp_path, [2, 2])
    (tmp_path / "cat00" / "bad.png").write_bytes(b"not an image")
    ds = load_dataset(tmp_path, SplitSpec(ratio=0.5), image_size=4)
    assert len(ds.images["cat00"]) == 2
    bad = tmp_path / "broken"
    bad.mkdir()
    (bad / "x.png").write_bytes(b"junk")
    with pytest.raises(DatasetError, match="no decodable"):
        load_dataset(tmp_path, image_size=4)


def test_episode_too_small_category(tmp_path):
    ds = load_dataset(_write_tree(tmp_path, [2, 2]), SplitSpec(seen=("cat00",)), image_size=4)
    with pytest.raises(EpisodeError):
        sample_episode(ds, np.random.default_rng(0), K=3)


def test_episode_shape_and_draws(glyph_dataset):
    ep = sample_episode(glyph_dataset, np.random.default_rng(0), K=3, num_coefficient_draws=2)
    assert ep.images.shape[0] == 3 and len(ep.coefficients) == 2
    assert len(set(ep.indices.tolist())) == 3
    assert ep.category in glyph_dataset.seen
    assert ep.label == glyph_dataset.seen.index(ep.category)
    assert not np.allclose(ep.coefficients[0], ep.coefficients[1])


def test_episode_k1_coefficients(glyph_dataset):
    ep = sample_episode(glyph_dataset, np.random.default_rng(0), K=1)
    assert ep.coefficients[0].tolist() == [1.0]
    with pytest.raises(EpisodeError):
        sample_episode(glyph_dataset, np.random.default_rng(0), K=1, num_coefficient_draws=2)


def test_episode_sequence_reproducible(glyph_dataset):
    def seq(seed):
        rng = np.random.default_rng(seed)
        return [sample_episode(glyph_dataset, rng, 3, num_coefficient_draws=2) for _ in range(5)]
    for e1, e2 in zip(seq(4), seq(4)):
        assert e1.category == e2.category
        np.testing.assert_array_equal(e1.indices, e2.indices)
        np.testing.assert_array_equal(e1.coefficients[1], e2.coefficients[1])


def test_coefficients_k1_and_errors():
    assert sample_coefficients(1, np.random.default_rng(0)).tolist() == [1.0]
    with pytest.raises(ValueError):
        sample_coefficients(0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_coefficients_on_simplex(k, seed):
    a = sample_coefficients(k, np.random.default_rng(seed))
    assert a.shape == (k,)
    assert (a >= 0).all()
    assert abs(a.sum() - 1) <= 1e-6


def test_coefficient_mean_is_uniform_centroid():
    # Monte-Carlo oracle: the uniform law on the simplex has mean (1/K, ..., 1/K)
    # and marginal Beta(1, K-1) with variance (K-1)/(K^2 (K+1)).
    rng = np.random.default_rng(123)
    a = np.stack([sample_coefficients(3, rng) for _ in range(100_000)])
    np.testing.assert_allclose(a.mean(0), [1 / 3] * 3, atol=0.01)
    np.testing.assert_allclose(a.var(0), [2 / 36] * 3, atol=0.003)
