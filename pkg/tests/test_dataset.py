import numpy as np
import pytest

from modicf import dataset as ds


@pytest.fixture(scope="module")
def small_bundle():
    return ds.generate_synthetic(
        n_users=60, n_items=40, n_modalities=2, dims=[8, 8],
        n_latent_groups=4, density=0.05, seed=11,
    )


def test_synthetic_interaction_count_within_3_sigma():
    bundle = ds.generate_synthetic(300, 200, 2, [16, 16], 5, 0.02, seed=7)
    n = 300 * 200
    expected = n * 0.02
    sigma = np.sqrt(n * 0.02 * 0.98)
    realized = int(bundle.interactions.sum())
    assert abs(realized - expected) <= 3 * sigma


def test_synthetic_same_seed_identical():
    a = ds.generate_synthetic(50, 30, 2, [4, 4], 3, 0.05, seed=5)
    b = ds.generate_synthetic(50, 30, 2, [4, 4], 3, 0.05, seed=5)
    assert np.array_equal(a.interactions, b.interactions)
    assert np.array_equal(a.split, b.split)
    for ma, mb in zip(a.modalities, b.modalities):
        assert np.array_equal(ma.data, mb.data)


def test_synthetic_single_group_single_cluster():
    bundle = ds.generate_synthetic(40, 30, 2, [6, 6], 1, 0.08, seed=3)
    rows = bundle.modalities[0].data
    # one shared mean: average distance to the global centroid stays at noise level
    centroid = rows.mean(axis=0)
    spread = np.linalg.norm(rows - centroid, axis=1).mean()
    assert spread < 0.3 * np.sqrt(6) * 2.5


def test_synthetic_coverage(small_bundle):
    train = small_bundle.train_matrix()
    assert train.sum(axis=1).min() >= 1
    assert train.sum(axis=0).min() >= 1


def test_splits_partition(small_bundle):
    labeled = small_bundle.split >= 0
    assert np.array_equal(labeled, small_bundle.interactions == 1)


def test_mask_rate_and_coverage(small_bundle):
    masked, plan = ds.apply_missing_mask(small_bundle, mr=0.4, seed=9)
    n_cells = small_bundle.n_items * small_bundle.n_modalities
    realized = sum(len(a) for a in plan.assignment)
    assert abs(realized - 0.4 * n_cells) <= small_bundle.n_modalities
    assert masked.indicator.entries.sum(axis=1).min() >= 1
    for m in range(masked.n_modalities):
        rows = masked.indicator.missing_set(m)
        assert np.all(masked.modalities[m].data[rows] == 0)


def test_mask_mr_boundaries(small_bundle):
    with pytest.raises(ds.DataError):
        ds.apply_missing_mask(small_bundle, mr=0.0, seed=1)
    with pytest.raises(ds.DataError):
        ds.apply_missing_mask(small_bundle, mr=0.6, seed=1)  # M=2 caps at 0.5
    masked, plan = ds.apply_missing_mask(small_bundle, mr=0.5, seed=1)
    per_item = np.array([len(a) for a in plan.assignment])
    assert per_item.max() == 1  # M=2, MR=0.5: exactly one modality lost per masked item


def test_mask_plan_reapplication_identical(small_bundle):
    masked, plan = ds.apply_missing_mask(small_bundle, mr=0.3, seed=13)
    again = ds.apply_mask_plan(small_bundle, plan)
    assert np.array_equal(masked.indicator.entries, again.indicator.entries)
    for a, b in zip(masked.modalities, again.modalities):
        assert np.array_equal(a.data, b.data)


def test_masks_nested_across_rates(small_bundle):
    plans = {}
    for mr in (0.1, 0.25, 0.4, 0.5):
        plans[mr] = ds.build_mask_plan(small_bundle.n_items, 2, mr, seed=21)
    cells = {mr: set(p.cells()) for mr, p in plans.items()}
    assert cells[0.1] <= cells[0.25] <= cells[0.4] <= cells[0.5]


def test_heldout_and_imputation_mse(small_bundle):
    masked, plan = ds.apply_missing_mask(small_bundle, mr=0.4, seed=2)
    heldout = ds.extract_heldout(small_bundle, plan)
    zero_mse = ds.imputation_mse(masked, heldout)
    # zero rows against true features: mse equals mean squared feature value
    total, count = 0.0, 0
    for m, (items, truth) in heldout.items():
        total += float((truth.astype(np.float64) ** 2).sum())
        count += truth.size
    assert zero_mse == pytest.approx(total / count)


def test_bpr_triples_contract(small_bundle):
    rng = np.random.default_rng(0)
    triples = ds.sample_bpr_triples(small_bundle, 256, rng)
    train = small_bundle.train_matrix()
    assert len(triples) == 256
    for u, ip, in_ in triples:
        assert train[u, ip] == 1
        assert train[u, in_] == 0


def test_bpr_empty_batch(small_bundle):
    rng = np.random.default_rng(0)
    assert ds.sample_bpr_triples(small_bundle, 0, rng) == []


def test_bpr_negative_uniformity_chi2():
    # single user with one positive; negatives should be uniform over the rest
    bundle = ds.generate_synthetic(30, 50, 2, [4, 4], 2, 0.1, seed=17)
    rng = np.random.default_rng(4)
    u = 0
    train = bundle.train_matrix()
    candidates = np.flatnonzero(train[u] == 0)
    counts = np.zeros(bundle.n_items)
    draws = 0
    while draws < 10000:
        batch = ds.sample_bpr_triples(bundle, 512, rng)
        for uu, _, i_n in batch:
            if uu == u:
                counts[i_n] += 1
                draws += 1
    observed = counts[candidates]
    n = observed.sum()
    expected = n / candidates.size
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    from scipy import stats
    crit = stats.chi2.ppf(0.95, df=candidates.size - 1)
    assert chi2 < crit
