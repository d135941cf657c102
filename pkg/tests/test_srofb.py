import numpy as np
import pytest

from fewshot_seg.data import Episode
from fewshot_seg.models import IdentityEncoder
from fewshot_seg.numerics import finite_difference_check
from fewshot_seg.srofb import (
    DegenerateSampleError,
    FewShotSegmenter,
    OFBClassifier,
    PixelSampleSet,
    RefineConfig,
    gather_support_pixels,
    predict_mask,
    refine_classifier,
    rough_segment,
    score_map_to_mask,
    segment_episode,
    segment_features,
    select_confident_pixels,
)
from fewshot_seg.training import MaskPrototypes, compute_mask_prototypes
from fewshot_seg.validation import ConfigError, MissingForegroundError, NotFittedError


def blob_episode(rng, C=6, size=8, noise=0.3):
    """Features where fg cells point one way and bg cells another, plus noise."""
    fg_dir, bg_dir = rng.normal(size=(2, C))

    def make():
        mask = np.zeros((size, size), bool)
        y, x = rng.integers(1, size - 4, size=2)
        mask[y:y + 4, x:x + 4] = True
        f = np.where(mask[None], fg_dir[:, None, None], bg_dir[:, None, None])
        f = f + noise * rng.normal(size=f.shape)
        return np.abs(f).astype(np.float32), mask

    return make(), make()


def test_rough_segment_examples():
    protos = MaskPrototypes(p_fg=np.array([1.0, 0.0]), p_bg=np.array([0.0, 1.0]))
    feats = np.zeros((2, 2, 2))
    feats[0] = 1.0
    scores = rough_segment(feats, protos)
    assert scores[1, 0, 0] > 1 - 1e-8
    assert np.allclose(scores.sum(axis=0), 1.0, atol=1e-6)
    flat = rough_segment(np.ones((2, 2, 2)), MaskPrototypes(np.ones(2), np.ones(2)))
    assert np.allclose(flat, 0.5)


def test_select_confident_enumeration():
    scores = np.full((2, 3, 3), 0.5)
    scores[1, 0, 1] = scores[1, 2, 2] = 0.8
    scores[0] = 1.0 - scores[1]
    feats = np.arange(18, dtype=np.float32).reshape(2, 3, 3)
    sel = select_confident_pixels(scores, feats, RefineConfig())
    assert len(sel.positives) == 2 and len(sel.negatives) == 0
    assert {tuple(v) for v in sel.positives} == {(1.0, 10.0), (8.0, 17.0)}
    none = select_confident_pixels(np.full((2, 3, 3), 0.5), feats, RefineConfig())
    assert len(none.positives) == len(none.negatives) == 0


def brute_select(scores, feats, tau_fg, tau_bg, cap):
    C = feats.shape[0]
    out = []
    for ch, tau in ((1, tau_fg), (0, tau_bg)):
        cells = [(-scores[ch].ravel()[i], i) for i in range(scores[ch].size) if scores[ch].ravel()[i] > tau]
        cells.sort()
        out.append(np.array([feats.reshape(C, -1)[:, i] for _, i in cells[:cap]]).reshape(-1, C))
    return out


@pytest.mark.parametrize("seed", range(10))
def test_select_confident_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random((8, 8)), 2)
    scores = np.stack([1 - scores, scores])
    feats = rng.normal(size=(3, 8, 8)).astype(np.float32)
    cfg = RefineConfig(max_pixels_per_class=10)
    sel = select_confident_pixels(scores, feats, cfg)
    pos, neg = brute_select(scores, feats, cfg.tau_fg, cfg.tau_bg, 10)
    assert np.array_equal(sel.positives, pos) and np.array_equal(sel.negatives, neg)


def test_harvest_sound_and_monotone(rng):
    scores = rng.random((8, 8))
    scores = np.stack([1 - scores, scores])
    feats = rng.normal(size=(2, 8, 8)).astype(np.float32)
    prev = None
    for tau in (0.55, 0.7, 0.85):
        sel = select_confident_pixels(scores, feats, RefineConfig(tau_fg=tau))
        chosen = {tuple(v) for v in sel.positives}
        flat = feats.reshape(2, -1).T
        assert all(scores[1].ravel()[i] > tau for i in range(64) if tuple(flat[i]) in chosen)
        if prev is not None:
            assert chosen <= prev
        prev = chosen


def test_gather_support_pixels_counts():
    f = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    m = np.zeros((4, 4), bool)
    m[0, :] = True
    s = gather_support_pixels([f], [m], max_pixels_per_class=8)
    assert len(s.positives) == 4 and len(s.negatives) == 8
    assert set(s.pos_origin) == {"support"}
    two = gather_support_pixels([f, f], [m, m], max_pixels_per_class=100)
    assert len(two.positives) == 8 and len(two.negatives) == 24
    again = gather_support_pixels([f], [m], max_pixels_per_class=8)
    assert np.array_equal(s.negatives, again.negatives)
    with pytest.raises(MissingForegroundError):
        gather_support_pixels([f], [np.zeros((4, 4), bool)])


def test_classifier_separable_toy():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(2, 0.3, size=(40, 2)), rng.normal(-2, 0.3, size=(40, 2))])
    y = np.array([1] * 40 + [0] * 40)
    clf = OFBClassifier(hidden_size=16, n_iter=100, random_state=0).fit(X, y)
    assert (clf.predict(X) == y).mean() == 1.0
    assert clf.get_params()["hidden_size"] == 16


def test_classifier_lr_zero_keeps_init(rng):
    X = rng.normal(size=(10, 3))
    y = np.array([0, 1] * 5)
    clf = OFBClassifier(learning_rate=0.0, n_iter=5).fit(X, y)
    assert np.array_equal(clf.fc1_.params["weight"], clf.init_params_[0]["weight"])
    assert np.array_equal(clf.fc2_.params["bias"], clf.init_params_[1]["bias"])


def test_classifier_errors(rng):
    with pytest.raises(DegenerateSampleError):
        OFBClassifier().fit(rng.normal(size=(4, 2)), np.ones(4))
    with pytest.raises(NotFittedError):
        OFBClassifier().predict(np.zeros((1, 2)))


def test_iteration_schedule():
    cfg = RefineConfig()
    assert cfg.iterations(1) == 10 and cfg.iterations(5) == 100
    s = PixelSampleSet(np.ones((3, 2), np.float32), -np.ones((3, 2), np.float32))
    assert len(refine_classifier(s, cfg, 1).loss_history_) == 10
    assert len(refine_classifier(s, cfg, 5).loss_history_) == 100
    with pytest.raises(ConfigError):
        RefineConfig(tau_fg=1.0)


@pytest.mark.parametrize("seed", range(3))
def test_refinement_objective_gradient(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 4))
    y = rng.integers(0, 2, size=12)
    y[:2] = (0, 1)
    clf = OFBClassifier(hidden_size=6, dropout=0.2, random_state=seed)
    clf._init(4)
    for layer in (clf.fc1_, clf.fc2_):
        for k in layer.params:
            layer.params[k] = layer.params[k].astype(np.float64)
            layer.grads[k] = layer.grads[k].astype(np.float64)
    clf.drop_.fixed_mask = rng.random((12, 6)) >= 0.2
    params = [clf.fc1_.params["weight"], clf.fc1_.params["bias"], clf.fc2_.params["weight"], clf.fc2_.params["bias"]]

    def fn(_):
        for layer in (clf.fc1_, clf.fc2_):
            layer.zero_grad()
        h = X
        for layer in clf.layers_:
            h = layer.forward(h, train=True)
        from fewshot_seg.numerics import binary_cross_entropy, sigmoid
        s = sigmoid(h[:, 0])
        loss, ds = binary_cross_entropy(s, y)
        clf._backward(ds * s * (1 - s))
        return loss, [clf.fc1_.grads["weight"].copy(), clf.fc1_.grads["bias"].copy(),
                      clf.fc2_.grads["weight"].copy(), clf.fc2_.grads["bias"].copy()]

    assert finite_difference_check(fn, params, eps=1e-5) < 1e-3


def test_refinement_loss_decreases_on_average():
    drops = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        (fs, ms), (fq, _) = blob_episode(rng)
        cfg = RefineConfig(seed=seed)
        scores = rough_segment(fq, compute_mask_prototypes(fs, ms), cfg.temperature)
        samples = gather_support_pixels([fs], [ms], seed=seed) + select_confident_pixels(scores, fq, cfg)
        clf = refine_classifier(samples, cfg)
        X, y = samples.to_xy()
        assert np.isfinite(clf.loss_history_).all()
        drops.append(clf.loss_history_[0] - clf.loss(X, y)[0])
    assert np.mean(drops) > 0


def test_predict_mask_conventions():
    clf = OFBClassifier(hidden_size=4).fit(np.array([[1.0, 0], [0, 1.0]]), np.array([1, 0]))
    for layer in (clf.fc1_, clf.fc2_):
        for k in layer.params:
            layer.params[k][...] = 0.0
    feats = np.random.default_rng(0).normal(size=(2, 4, 4))
    assert not predict_mask(clf, feats, (8, 8)).any()
    clf.fc2_.params["bias"][...] = 5.0
    assert predict_mask(clf, feats, (8, 8)).all()


def test_predict_mask_matches_per_pixel_oracle(rng):
    X = rng.normal(size=(20, 3))
    y = (X[:, 0] > 0).astype(int)
    y[:2] = (0, 1)
    clf = OFBClassifier(hidden_size=8, n_iter=20).fit(X, y)
    feats = rng.normal(size=(3, 8, 8)).astype(np.float32)
    probs = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            probs[i, j] = clf.predict_proba(feats[:, i, j][None])[0, 1]
    assert np.array_equal(predict_mask(clf, feats, (8, 8)), probs > 0.5)
    assert np.array_equal(score_map_to_mask(probs, (8, 8)), probs > 0.5)


def test_identical_pair_self_refined_not_worse():
    from fewshot_seg.data import render_image

    cfg = RefineConfig()
    iou = {"matching": [], "srofb_self_refined": []}
    for seed in range(30):
        img, m, _ = render_image(seed % 8, np.random.default_rng(seed), 32)
        f = img.transpose(2, 0, 1)
        for mode in iou:
            pred = segment_features(f, [f], [m], (32, 32), mode, cfg)
            iou[mode].append((pred & m).sum() / max((pred | m).sum(), 1))
    assert np.mean(iou["srofb_self_refined"]) >= np.mean(iou["matching"])


def test_segment_episode_wiring():
    rng = np.random.default_rng(5)
    (f, m), _ = blob_episode(rng)
    hwc = f.transpose(1, 2, 0)
    pred = segment_episode(Episode(0, [hwc], [m], hwc, m), _Chw(IdentityEncoder(6)), RefineConfig(), "matching")
    assert np.array_equal(pred, segment_features(f, [f], [m], (8, 8), "matching", RefineConfig()))


class _Chw(IdentityEncoder):
    """Identity encoder over (H, W, C) arrays, for wiring tests."""

    def __init__(self, inner):
        super().__init__(inner.out_channels)

    def encode(self, images, batch_size=64):
        return np.asarray(images, np.float32).transpose(0, 3, 1, 2)


def test_zero_step_classifier_differs_from_matching_only_by_init():
    rng = np.random.default_rng(2)
    (fs, ms), (fq, _) = blob_episode(rng)
    cfg = RefineConfig(iterations_1shot=0, seed=3)
    a = segment_features(fq, [fs], [ms], (8, 8), "srofb_support_only", cfg)
    b = segment_features(fq, [fs], [ms], (8, 8), "srofb_support_only", cfg)
    assert np.array_equal(a, b)
    clf = refine_classifier(gather_support_pixels([fs], [ms], seed=3), cfg)
    assert np.array_equal(a, predict_mask(clf, fq, (8, 8)))


def test_fallbacks_and_modes(rng):
    (fs, ms), (fq, _) = blob_episode(rng)
    with pytest.raises(ConfigError):
        segment_features(fq, [fs], [ms], (8, 8), "magic", RefineConfig())
    # a query with no confident pixels on either side still yields a mask
    cfg = RefineConfig(tau_fg=0.999999, tau_bg=0.999999)
    assert segment_features(fq, [fs], [ms], (8, 8), "srofb_self_refined", cfg).shape == (8, 8)


def test_few_shot_segmenter_estimator():
    rng = np.random.default_rng(0)
    (fs, ms), (fq, mq) = blob_episode(rng)
    seg = FewShotSegmenter(encoder=_Chw(IdentityEncoder(6)), mode="srofb_self_refined")
    with pytest.raises(NotFittedError):
        seg.predict(fq.transpose(1, 2, 0))
    seg.fit([fs.transpose(1, 2, 0)], [ms])
    pred = seg.predict(fq.transpose(1, 2, 0))
    assert pred.shape == (8, 8)
    assert (pred & mq).sum() / (pred | mq).sum() > 0.5
    assert seg.get_params()["tau_fg"] == 0.7
