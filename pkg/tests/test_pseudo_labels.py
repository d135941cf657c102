import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fewshot_seg.clustering import ClusterConfig, PrototypeHierarchy, build_hierarchy, kmeans, l2_normalize
from fewshot_seg.numerics import cosine_similarity
from fewshot_seg.pseudo_labels import (
    assign_pseudo_labels,
    hierarchy_hash,
    load_pseudo_labels,
    save_pseudo_labels,
)
from fewshot_seg.validation import DimensionError, downsample_mask


def random_hierarchy(rng, C=5, sizes=((4, 5), (3, 3), (1, 2))):
    return PrototypeHierarchy([(l2_normalize(rng.normal(size=(f, C))).astype(np.float32),
                                l2_normalize(rng.normal(size=(b, C))).astype(np.float32)) for f, b in sizes])


def brute_force(features, fg_mask, hierarchy):
    C, h, w = features.shape
    fg = downsample_mask(fg_mask, (h, w))
    out = []
    for P_fg, P_bg in hierarchy.levels:
        lab = np.zeros((h, w), int)
        for i in range(h):
            for j in range(w):
                protos, offset = (P_fg, 0) if fg[i, j] else (P_bg, len(P_fg))
                best, best_k = -np.inf, 0
                for k, p in enumerate(protos):
                    c = cosine_similarity(features[:, i, j], p)
                    if c > best:
                        best, best_k = c, k
                lab[i, j] = best_k + offset
        out.append(lab)
    return out


def test_exact_match_offset():
    rng = np.random.default_rng(0)
    h = random_hierarchy(rng, sizes=((4, 3),))
    feats = np.broadcast_to(h.levels[0][1][2][:, None, None], (5, 2, 2)).copy()
    stack = assign_pseudo_labels(feats, np.zeros((2, 2), bool), h)
    assert np.all(stack.levels[0] == 6)


def test_constant_field_empty_mask():
    h = random_hierarchy(np.random.default_rng(1))
    stack = assign_pseudo_labels(np.ones((5, 3, 3), np.float32), np.zeros((3, 3), bool), h)
    for lab, (f, _) in zip(stack.levels, h.level_sizes):
        assert len(np.unique(lab)) == 1 and lab[0, 0] >= f


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h = random_hierarchy(rng)
    feats = rng.normal(size=(5, 8, 8)).astype(np.float32)
    mask = rng.random((16, 16)) < 0.4
    stack = assign_pseudo_labels(feats, mask, h)
    for a, b in zip(stack.levels, brute_force(feats, mask, h)):
        assert np.array_equal(a, b)


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_partition_and_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    h = random_hierarchy(rng)
    feats = rng.normal(size=(5, 4, 4)).astype(np.float32)
    mask = rng.random((4, 4)) < 0.5
    a = assign_pseudo_labels(feats, mask, h)
    b = assign_pseudo_labels(feats * np.float32(lam), mask, h)
    for (f, bsz), la, lb in zip(h.level_sizes, a.levels, b.levels):
        assert np.array_equal(la, lb)
        assert np.all(la[mask] < f)
        assert np.all((la[~mask] >= f) & (la[~mask] < f + bsz))


def test_consistent_with_kmeans_assignment():
    rng = np.random.default_rng(3)
    X = l2_normalize(rng.normal(size=(40, 6)))
    res = kmeans(X, 5, seed=0)
    h = PrototypeHierarchy([(res.centers, res.centers)])
    for x, a in zip(X[:10], res.assignments[:10]):
        lab = assign_pseudo_labels(x.astype(np.float32)[:, None, None], np.ones((1, 1), bool), h)
        assert lab.levels[0][0, 0] == a


def test_channel_mismatch():
    h = random_hierarchy(np.random.default_rng(0), C=5)
    with pytest.raises(DimensionError):
        assign_pseudo_labels(np.ones((4, 2, 2)), np.zeros((2, 2), bool), h)


def test_persistence_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    h = random_hierarchy(rng)
    stacks = {f"im{i}": assign_pseudo_labels(rng.normal(size=(5, 4, 4)), rng.random((4, 4)) < 0.5, h)
              for i in range(3)}
    save_pseudo_labels(tmp_path, stacks, h)
    back, manifest = load_pseudo_labels(tmp_path)
    assert manifest["hierarchy_hash"] == hierarchy_hash(h)
    for k in stacks:
        assert all(np.array_equal(a, b) for a, b in zip(stacks[k].levels, back[k].levels))
