"""Multimodal recommendation data: bundles, synthetic generation, masking, sampling.

A bundle holds the binary interaction matrix, per-modality item feature
matrices, the observed/missing indicator, and per-interaction split labels.
Bundles are immutable by convention; masking returns a new bundle.
"""

import warnings
from dataclasses import dataclass

import numpy as np

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}
SPLIT_LABELS = {v: k for k, v in SPLIT_NAMES.items()}

MAX_RESAMPLE_ROUNDS = 50


class DataError(ValueError):
    pass


@dataclass
class ModalityFeatures:
    name: str
    dim: int
    data: np.ndarray  # (n_items, dim) float32

    def validate(self, n_items):
        if self.dim <= 0:
            raise DataError(f"modality {self.name!r} has non-positive dim")
        if self.data.shape != (n_items, self.dim):
            raise DataError(
                f"modality {self.name!r} shape {self.data.shape} != ({n_items}, {self.dim})"
            )
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"modality {self.name!r} contains non-finite values")


@dataclass
class IndicatorMatrix:
    entries: np.ndarray  # (n_items, n_modalities) uint8

    @property
    def n_items(self):
        return self.entries.shape[0]

    @property
    def n_modalities(self):
        return self.entries.shape[1]

    def observed_set(self, m):
        return np.flatnonzero(self.entries[:, m] == 1)

    def missing_set(self, m):
        return np.flatnonzero(self.entries[:, m] == 0)

    def incomplete_items(self):
        """Items with at least one missing modality."""
        return np.flatnonzero((self.entries == 0).any(axis=1))

    def validate(self):
        if not np.all((self.entries == 0) | (self.entries == 1)):
            raise DataError("indicator entries must be 0/1")
        if np.any(self.entries.sum(axis=1) == 0):
            raise DataError("every item must have at least one observed modality")


@dataclass
class MaskPlan:
    mr: float
    seed: int
    assignment: list  # per item: sorted list of masked modality indices

    def cells(self):
        for i, mods in enumerate(self.assignment):
            for m in mods:
                yield i, m


@dataclass
class DatasetBundle:
    n_users: int
    n_items: int
    interactions: np.ndarray  # (n_users, n_items) uint8
    modalities: list
    indicator: IndicatorMatrix
    split: np.ndarray  # (n_users, n_items) int8: -1 none, 0 train, 1 val, 2 test

    @property
    def n_modalities(self):
        return len(self.modalities)

    def split_mask(self, which):
        return self.split == SPLIT_NAMES[which]

    def train_matrix(self):
        return (self.split == SPLIT_TRAIN).astype(np.uint8)

    def validate(self):
        if not np.all((self.interactions == 0) | (self.interactions == 1)):
            raise DataError("interaction matrix must be binary")
        if self.interactions.shape != (self.n_users, self.n_items):
            raise DataError("interaction matrix shape mismatch")
        if self.split.shape != self.interactions.shape:
            raise DataError("split matrix shape mismatch")
        if np.any((self.split >= 0) != (self.interactions == 1)):
            raise DataError("split labels must cover exactly the interactions")
        train = self.train_matrix()
        if train.sum() == 0:
            raise DataError("empty training split")
        if np.any(train.sum(axis=1) == 0):
            raise DataError("user without train interactions")
        if np.any(train.sum(axis=0) == 0):
            raise DataError("item without train interactions")
        for mod in self.modalities:
            mod.validate(self.n_items)
        if self.indicator.entries.shape != (self.n_items, self.n_modalities):
            raise DataError("indicator shape mismatch")
        self.indicator.validate()
        for m, mod in enumerate(self.modalities):
            missing = self.indicator.missing_set(m)
            if missing.size and np.any(mod.data[missing] != 0):
                raise DataError(f"masked rows of modality {mod.name!r} must be zero")

    def copy(self):
        return DatasetBundle(
            n_users=self.n_users,
            n_items=self.n_items,
            interactions=self.interactions.copy(),
            modalities=[ModalityFeatures(m.name, m.dim, m.data.copy()) for m in self.modalities],
            indicator=IndicatorMatrix(self.indicator.entries.copy()),
            split=self.split.copy(),
        )


def _assign_splits(interactions, rng):
    """8:1:1 per-user split; guarantees train coverage for every user and item."""
    n_users, n_items = interactions.shape
    split = np.full((n_users, n_items), -1, dtype=np.int8)
    for u in range(n_users):
        items = np.flatnonzero(interactions[u])
        if items.size == 0:
            raise DataError(f"user {u} has no interactions")
        order = rng.permutation(items)
        n = items.size
        n_val = int(round(0.1 * n))
        n_test = int(round(0.1 * n))
        while n_val + n_test > n - 1:  # keep at least one train interaction
            if n_test > 0:
                n_test -= 1
            elif n_val > 0:
                n_val -= 1
        split[u, order[:n_val]] = SPLIT_VAL
        split[u, order[n_val:n_val + n_test]] = SPLIT_TEST
        split[u, order[n_val + n_test:]] = SPLIT_TRAIN
    # any item left without a train interaction gets its first labeled cell promoted
    train_per_item = (split == SPLIT_TRAIN).sum(axis=0)
    for i in np.flatnonzero(train_per_item == 0):
        users = np.flatnonzero(interactions[:, i])
        split[users[0], i] = SPLIT_TRAIN
    return split


def generate_synthetic(n_users, n_items, n_modalities, dims, n_latent_groups,
                       density, seed, noise_scale=0.3, within_over_cross=10.0):
    """Block-structured synthetic bundle.

    Users and items each belong to a latent group; interactions are far more
    likely within a group than across. Every modality row is its item group's
    mean vector plus Gaussian noise, so any observed modality is informative
    about the others.
    """
    if n_users <= 0 or n_items <= 0 or n_modalities <= 0 or n_latent_groups <= 0:
        raise DataError("counts must be positive")
    if not 0 < density < 1:
        raise DataError("density must lie in (0, 1)")
    if len(dims) != n_modalities:
        raise DataError("dims length must equal n_modalities")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(5,)))
    user_groups = rng.integers(0, n_latent_groups, size=n_users)
    item_groups = rng.integers(0, n_latent_groups, size=n_items)

    g = n_latent_groups
    p_cross = density / (1.0 + (within_over_cross - 1.0) / g)
    p_within = min(within_over_cross * p_cross, 0.97)

    probs = np.where(user_groups[:, None] == item_groups[None, :], p_within, p_cross)
    interactions = (rng.random((n_users, n_items)) < probs).astype(np.uint8)

    for _ in range(MAX_RESAMPLE_ROUNDS):
        empty_users = np.flatnonzero(interactions.sum(axis=1) == 0)
        for u in empty_users:
            interactions[u] = rng.random(n_items) < probs[u]
        empty_items = np.flatnonzero(interactions.sum(axis=0) == 0)
        for i in empty_items:
            interactions[:, i] = rng.random(n_users) < probs[:, i]
        if interactions.sum(axis=1).min() > 0 and interactions.sum(axis=0).min() > 0:
            break
    else:
        raise DataError("could not sample interactions covering every user and item")

    modalities = []
    for m in range(n_modalities):
        means = rng.normal(size=(g, dims[m]))
        rows = means[item_groups] + noise_scale * rng.normal(size=(n_items, dims[m]))
        modalities.append(ModalityFeatures(f"mod{m}", dims[m], rows.astype(np.float32)))

    split = _assign_splits(interactions, rng)
    bundle = DatasetBundle(
        n_users=n_users,
        n_items=n_items,
        interactions=interactions,
        modalities=modalities,
        indicator=IndicatorMatrix(np.ones((n_items, n_modalities), dtype=np.uint8)),
        split=split,
    )
    bundle.validate()
    return bundle


def build_mask_plan(n_items, n_modalities, mr, seed):
    """Choose item-modality cells to mask at the requested missing rate.

    All cells are shuffled with the seed and masked greedily in order,
    skipping any cell whose masking would leave its item fully missing.
    The same seed yields nested masks across increasing rates.
    """
    m = n_modalities
    if m < 2:
        raise DataError("masking requires at least two modalities")
    if not 0 < mr <= (m - 1) / m:
        raise DataError(f"missing rate must lie in (0, {(m - 1)}/{m}], got {mr}")
    target = int(round(mr * n_items * m))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0,)))
    cells = rng.permutation(n_items * m)
    observed_left = np.full(n_items, m, dtype=np.int64)
    assignment = [[] for _ in range(n_items)]
    masked = 0
    for cell in cells:
        if masked >= target:
            break
        i, mod = divmod(int(cell), m)
        if observed_left[i] <= 1:
            continue
        observed_left[i] -= 1
        assignment[i].append(mod)
        masked += 1
    if abs(masked - mr * n_items * m) > m:
        raise DataError("could not realize the requested missing rate")
    return MaskPlan(mr=float(mr), seed=int(seed), assignment=[sorted(a) for a in assignment])


def apply_mask_plan(bundle, plan):
    """Zero the planned rows and update the indicator; returns a new bundle."""
    out = bundle.copy()
    entries = np.ones((bundle.n_items, bundle.n_modalities), dtype=np.uint8)
    for i, mod in plan.cells():
        entries[i, mod] = 0
        out.modalities[mod].data[i] = 0.0
    out.indicator = IndicatorMatrix(entries)
    out.indicator.validate()
    return out


def apply_missing_mask(bundle, mr, seed):
    plan = build_mask_plan(bundle.n_items, bundle.n_modalities, mr, seed)
    return apply_mask_plan(bundle, plan), plan


def extract_heldout(bundle, plan):
    """Pre-mask feature rows for the masked cells, keyed by modality index.

    Kept outside the bundle so training code never sees them; used only for
    imputation error reporting.
    """
    heldout = {}
    for m, mod in enumerate(bundle.modalities):
        items = np.array(sorted(i for i, mm in plan.cells() if mm == m), dtype=np.int64)
        heldout[m] = (items, mod.data[items].copy())
    return heldout


def imputation_mse(bundle, heldout):
    """Mean squared error per feature element over all masked cells."""
    total, count = 0.0, 0
    for m, (items, truth) in heldout.items():
        if items.size == 0:
            continue
        diff = bundle.modalities[m].data[items].astype(np.float64) - truth.astype(np.float64)
        total += float((diff * diff).sum())
        count += diff.size
    if count == 0:
        raise DataError("no masked cells to evaluate")
    return total / count


def sample_bpr_triples(bundle, batch_size, rng):
    """(user, positive, negative) triples for pairwise ranking.

    Positives are uniform over train interactions; negatives are uniform over
    the user's non-train items, so held-out positives may appear as negatives.
    """
    train = bundle.train_matrix()
    users, items = np.nonzero(train)
    if users.size == 0:
        raise DataError("empty training split")
    triples = []
    warned = False
    attempts = 0
    max_attempts = max(1, 20 * batch_size)
    while len(triples) < batch_size and attempts < max_attempts:
        attempts += 1
        k = int(rng.integers(0, users.size))
        u, i_p = int(users[k]), int(items[k])
        candidates = np.flatnonzero(train[u] == 0)
        if candidates.size == 0:
            if not warned:
                warnings.warn(f"user {u} has no negative candidates; skipping")
                warned = True
            continue
        i_n = int(candidates[rng.integers(0, candidates.size)])
        triples.append((u, i_p, i_n))
    return triples
