import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfploc.pyramid import (
    BinaryMask,
    DensePyramid,
    FeatureGrid,
    LevelSpec,
    compression_cost,
    default_level_specs,
    densify,
    sample_mask,
    score_grid,
    sparsify,
    threshold_mask,
)


def make_grid(seed=0, h=6, w=5, dim=4, level_index=1):
    rng = np.random.default_rng(seed)
    spec = LevelSpec(level_index, 2**level_index, dim)
    values = rng.normal(size=(h, w, dim))
    scores = rng.uniform(0.0, 1.0, size=(h, w))
    return FeatureGrid(level=spec, values=values, scores=scores)


# -- level plan ------------------------------------------------------------


def test_level_spec_stride_is_power_of_two():
    spec = LevelSpec(3, 8, 128)
    assert spec.stride == 8
    with pytest.raises(ValueError):
        LevelSpec(3, 4, 128)  # stride must be 2**level_index
    with pytest.raises(ValueError):
        LevelSpec(0, 1, 32)
    with pytest.raises(ValueError):
        LevelSpec(1, 2, 33)  # odd dim cannot be halved


def test_grid_shape_is_ceil_division():
    assert LevelSpec(1, 2, 4).grid_shape((480, 640)) == (240, 320)
    assert LevelSpec(2, 4, 4).grid_shape((17, 13)) == (5, 4)
    assert LevelSpec(3, 8, 4).grid_shape((8, 8)) == (1, 1)


def test_default_level_specs():
    specs = default_level_specs()
    assert [s.dim for s in specs] == [32, 64, 128]
    assert [s.stride for s in specs] == [2, 4, 8]
    assert [s.level_index for s in specs] == [1, 2, 3]
    with pytest.raises(ValueError):
        default_level_specs((64, 64, 128))


# -- scoring ---------------------------------------------------------------


def test_score_grid_matches_sigmoid_oracle():
    rng = np.random.default_rng(3)
    features = rng.normal(size=(4, 7, 6))
    omega = rng.normal(size=6)
    expected = 1.0 / (1.0 + np.exp(-(features @ omega)))
    np.testing.assert_allclose(score_grid(features, omega), expected, rtol=0, atol=1e-15)


def test_score_grid_zero_weights_give_half():
    features = np.random.default_rng(0).normal(size=(3, 3, 5))
    out = score_grid(features, np.zeros(5))
    assert np.all(out == 0.5)


def test_score_grid_is_stable_on_extreme_logits():
    features = np.full((1, 2, 1), 1000.0)
    features[0, 1, 0] = -1000.0
    with np.errstate(over="raise"):
        out = score_grid(features, np.ones(1))
    assert out[0, 0] == 1.0
    assert out[0, 1] == 0.0


def test_score_grid_rejects_mismatched_omega():
    with pytest.raises(ValueError):
        score_grid(np.zeros((2, 2, 3)), np.zeros(4))


# -- masks -----------------------------------------------------------------


def test_sample_mask_is_seeded_and_binary():
    spec = LevelSpec(1, 2, 4)
    scores = np.random.default_rng(1).uniform(size=(8, 8))
    a = sample_mask(scores, spec, rng_seed=42)
    b = sample_mask(scores, spec, rng_seed=42)
    np.testing.assert_array_equal(a.bits, b.bits)
    assert set(np.unique(a.bits)) <= {0, 1}
    assert not np.array_equal(a.bits, sample_mask(scores, spec, rng_seed=43).bits)


def test_sample_mask_degenerate_probabilities():
    spec = LevelSpec(1, 2, 4)
    assert sample_mask(np.zeros((5, 5)), spec, 0).bits.sum() == 0
    assert sample_mask(np.ones((5, 5)), spec, 0).bits.sum() == 25


def test_sample_mask_frequency_tracks_probability():
    # 10^4 draws of a 16x16 Bernoulli field: observed keep-rate within 5 sigma
    spec = LevelSpec(1, 2, 4)
    scores = np.full((16, 16), 0.3)
    n = 10_000
    total = sum(sample_mask(scores, spec, seed).bits.sum() for seed in range(n))
    cells = scores.size * n
    sigma = np.sqrt(0.3 * 0.7 / cells)
    assert abs(total / cells - 0.3) < 5 * sigma


def test_threshold_mask_keeps_boundary_scores():
    spec = LevelSpec(1, 2, 4)
    scores = np.array([[0.49, 0.5], [0.51, 1.0]])
    bits = threshold_mask(scores, spec, tau=0.5).bits
    np.testing.assert_array_equal(bits, [[0, 1], [1, 1]])
    with pytest.raises(ValueError):
        threshold_mask(scores, spec, tau=1.5)


def test_binary_mask_rejects_non_binary_entries():
    with pytest.raises(ValueError):
        BinaryMask(LevelSpec(1, 2, 4), np.array([[0, 2]]))


# -- sparsify / densify ----------------------------------------------------


def test_sparsify_keeps_exactly_masked_cells():
    grid = make_grid(seed=5)
    mask = threshold_mask(grid.scores, grid.level, tau=0.5)
    sparse = sparsify(grid, mask)
    assert len(sparse) == int(mask.bits.sum())
    for (r, c), desc, score in zip(sparse.cells, sparse.descriptors, sparse.scores):
        assert mask.bits[r, c] == 1
        np.testing.assert_array_equal(desc, grid.values[r, c])
        assert score == grid.scores[r, c]


def test_densify_inverts_sparsify():
    grid = make_grid(seed=6)
    mask = sample_mask(grid.scores, grid.level, rng_seed=9)
    dense = densify(sparsify(grid, mask))
    np.testing.assert_array_equal(dense, grid.values * mask.bits[:, :, None])


def test_sparsify_clamps_zero_scores():
    # a cell can be sampled "keep" while its score underflows to 0.0; the
    # stored score is clamped to the smallest positive float
    spec = LevelSpec(1, 2, 2)
    grid = FeatureGrid(
        level=spec,
        values=np.ones((1, 1, 2)),
        scores=np.zeros((1, 1)),
    )
    sparse = sparsify(grid, BinaryMask(spec, np.ones((1, 1), dtype=np.uint8)))
    assert sparse.scores[0] > 0.0


def test_sparsify_rejects_mismatched_mask():
    grid = make_grid()
    with pytest.raises(ValueError):
        sparsify(grid, BinaryMask(grid.level, np.zeros((2, 2), dtype=np.uint8)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.0, 1.0))
def test_sparsify_cell_count_matches_mask(seed, tau):
    grid = make_grid(seed=seed)
    mask = threshold_mask(grid.scores, grid.level, tau)
    assert len(sparsify(grid, mask)) == int(mask.bits.sum())


# -- compression cost ------------------------------------------------------


def test_compression_cost_hand_example():
    scores = [np.array([[0.5, 0.25]]), np.array([[1.0]])]
    assert compression_cost(scores, dims=[2, 4]) == 0.75 * 2 + 1.0 * 4


def test_compression_cost_rejects_length_mismatch():
    with pytest.raises(ValueError):
        compression_cost([np.zeros((2, 2))], dims=[2, 4])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_compression_cost_is_expected_stored_scalars(seed):
    rng = np.random.default_rng(seed)
    scores = [rng.uniform(size=(4, 4)), rng.uniform(size=(2, 2))]
    dims = [int(rng.integers(2, 9)) * 2 for _ in scores]
    expected = sum(float(s.sum()) * d for s, d in zip(scores, dims))
    assert compression_cost(scores, dims) == pytest.approx(expected, rel=1e-12)


def test_compression_cost_monte_carlo_agreement():
    """Mean sampled cost over many mask draws approaches the expectation."""
    rng = np.random.default_rng(11)
    specs = [LevelSpec(1, 2, 4), LevelSpec(2, 4, 8)]
    scores = [rng.uniform(size=(16, 16)), rng.uniform(size=(8, 8))]
    dims = [s.dim for s in specs]
    expected = compression_cost(scores, dims)

    n = 10_000
    total = 0.0
    for draw in range(n):
        masks = [sample_mask(p, spec, rng_seed=draw * 2 + i) for i, (p, spec) in enumerate(zip(scores, specs))]
        total += sum(float(m.bits.sum()) * d for m, d in zip(masks, dims))
    mc_mean = total / n

    var_one = sum(d * d * float((p * (1 - p)).sum()) for p, d in zip(scores, dims))
    sigma = np.sqrt(var_one / n)
    assert abs(mc_mean - expected) < 5 * sigma


# -- containers ------------------------------------------------------------


def test_feature_grid_rejects_bad_scores():
    spec = LevelSpec(1, 2, 2)
    values = np.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        FeatureGrid(spec, values, np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        FeatureGrid(spec, values, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        FeatureGrid(spec, np.full((2, 2, 2), np.nan), np.zeros((2, 2)))


def test_dense_pyramid_level_lookup_and_validation():
    grids = []
    for spec in default_level_specs((4, 6, 8)):
        shape = spec.grid_shape((16, 16))
        grids.append(FeatureGrid(spec, np.zeros((*shape, spec.dim)), np.zeros(shape)))
    pyr = DensePyramid(levels=tuple(grids), image_shape=(16, 16))
    assert pyr.level(2).level.dim == 6
    assert pyr.deepest.level.level_index == 3
    with pytest.raises(KeyError):
        pyr.level(9)
    # grid shape inconsistent with the claimed image size
    with pytest.raises(ValueError):
        DensePyramid(levels=tuple(grids), image_shape=(64, 64))
    with pytest.raises(ValueError):
        DensePyramid(levels=(grids[0], grids[2]), image_shape=(16, 16))
