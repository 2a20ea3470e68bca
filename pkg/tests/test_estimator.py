import numpy as np
import pytest

from embedmask import EmbedMaskSegmenter, NotFittedError
from embedmask.scenes import SceneSpec, generate_scene


def _toy_data(n=3, size=32):
    scenes = [generate_scene(s, SceneSpec(height=size, width=size, min_instances=1,
                                          max_instances=2, min_size=8, max_size=16))
              for s in range(n)]
    X = [s.image for s in scenes]
    y = [s.instances for s in scenes]
    return X, y


def _fast_estimator(**kw):
    base = dict(width=4, embed_dim=4, total_iters=8, warmup_iters=2, batch=2, seed=0)
    base.update(kw)
    return EmbedMaskSegmenter(**base)


def test_get_set_params_roundtrip():
    est = EmbedMaskSegmenter(lr=0.02, embed_dim=16)
    params = est.get_params()
    assert params["lr"] == 0.02 and params["embed_dim"] == 16
    est.set_params(lr=0.5, margin_mode="constant")
    assert est.lr == 0.5 and est.margin_mode == "constant"
    with pytest.raises(ValueError, match="invalid parameter"):
        est.set_params(not_a_knob=1)


def test_constructor_stores_params_verbatim():
    est = EmbedMaskSegmenter(total_iters=99)
    assert est.total_iters == 99
    # construction must not validate (scikit-learn convention); fit does
    bad = EmbedMaskSegmenter(lr=-1.0)
    with pytest.raises(ValueError, match="lr"):
        bad.fit(*_toy_data(1))


def test_sklearn_clone_compatibility():
    sklearn = pytest.importorskip("sklearn")
    from sklearn.base import clone
    est = EmbedMaskSegmenter(lr=0.02, width=8)
    dup = clone(est)
    assert dup is not est
    assert dup.get_params() == est.get_params()


def test_requires_fit_before_predict():
    est = _fast_estimator()
    with pytest.raises(NotFittedError):
        est.predict([np.zeros((32, 32, 3), dtype=np.float32)])


def test_fit_predict_score_smoke():
    X, y = _toy_data(3)
    est = _fast_estimator()
    assert est.fit(X, y) is est
    assert est.params_ is not None
    assert est.n_iter_ == 8
    preds = est.predict(X)
    assert len(preds) == 3
    for image_preds in preds:
        for p in image_preds:
            assert 0.0 <= p.score <= 1.0
            assert p.mask.bits.shape == (32, 32)
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0
    report = est.evaluate(X, y)
    assert report.num_images == 3


def test_fit_validates_inputs():
    X, y = _toy_data(2)
    est = _fast_estimator()
    with pytest.raises(ValueError, match="instance lists"):
        est.fit(X, y[:1])
    bad = [np.zeros((31, 32, 3))]
    with pytest.raises(ValueError, match="divisible"):
        est.fit(bad, [[]])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        est.fit([X[0] * 5.0], [y[0]])


def test_fit_accepts_dict_instances():
    X, y = _toy_data(1)
    as_dicts = [[{"mask": inst.mask.bits, "category": inst.category}
                 for inst in y[0]]]
    est = _fast_estimator()
    est.fit(X, as_dicts)
    assert est.params_ is not None


def test_fit_deterministic_given_seed():
    X, y = _toy_data(2)
    a = _fast_estimator().fit(X, y)
    b = _fast_estimator().fit(X, y)
    for n in a.params_.tensors:
        assert np.array_equal(a.params_.tensors[n].data, b.params_.tensors[n].data)


def test_repr_shows_changed_params():
    est = EmbedMaskSegmenter(lr=0.5)
    assert "lr=0.5" in repr(est)
    assert "momentum" not in repr(est)
