"""Scikit-learn-style estimator wrapping training and clustering inference.

``EmbedMaskSegmenter`` follows the estimator protocol (``get_params`` /
``set_params`` / ``fit`` / ``predict`` / ``score``) without depending on
scikit-learn, so it composes with ``sklearn.base.clone``, grid-search
loops, and pipelines that only need detector-style fit/predict.

    seg = EmbedMaskSegmenter(total_iters=600, seed=0)
    seg.fit(images, instance_lists)
    predictions = seg.predict(images)   # list of PredictedInstance lists
    ap50 = seg.score(images, instance_lists)
"""

from __future__ import annotations

import inspect

from .evaluation import evaluate
from .inference import infer_masks
from .scenes import Scene
from .training import TrainConfig, train
from .validation import check_fitted, check_images, check_instances


class EmbedMaskSegmenter:
    """Instance segmenter: detection heads plus embedding clustering.

    Constructor arguments mirror TrainConfig plus ``seed``; they are
    stored verbatim (scikit-learn convention) and validated at fit time.
    """

    def __init__(self, lambda1=0.5, lambda2=0.1, lr=0.01, momentum=0.9,
                 warmup_iters=100, total_iters=3000, batch=8,
                 expand_factor=1.2, embed_dim=32, width=16,
                 margin_mode="learnable", sigma0=1.0, delta_a=0.5,
                 delta_b=1.5, delta=0.8, center_mode="proposal",
                 mask_train_scale=2, radius_factor=1.5, score_thresh=0.05,
                 nms_iou=0.6, max_detections=20, seed=0):
        args = locals()
        for name in self._parameter_names():
            setattr(self, name, args[name])

    @classmethod
    def _parameter_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._parameter_names()}

    def set_params(self, **params):
        valid = set(self._parameter_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"invalid parameter {name!r} for "
                                 f"{type(self).__name__}; valid: {sorted(valid)}")
            setattr(self, name, value)
        return self

    def _train_config(self) -> TrainConfig:
        kwargs = {name: getattr(self, name) for name in self._parameter_names()
                  if name != "seed"}
        return TrainConfig(**kwargs)

    def fit(self, X, y):
        """Train on images ``X`` and per-image instance lists ``y``."""
        config = self._train_config()
        images = check_images(X, scale=config.mask_train_scale)
        if len(y) != len(images):
            raise ValueError(f"got {len(images)} images but {len(y)} instance lists")
        scenes = []
        for i, (img, y_i) in enumerate(zip(images, y)):
            instances = check_instances(y_i, img.shape, index=i)
            scenes.append(Scene(image=img, instances=instances, seed=i))
        result = train(scenes, config, seed=self.seed)
        self.params_ = result.params
        self.train_config_ = config
        self.history_ = result.log
        self.n_iter_ = config.total_iters
        return self

    def predict(self, X):
        """Per-image lists of PredictedInstance for ``X``."""
        check_fitted(self)
        images = check_images(X, scale=self.train_config_.mask_train_scale)
        return [infer_masks(img, self.params_, self.train_config_) for img in images]

    def score(self, X, y):
        """Mask AP50 on (X, y) (higher is better)."""
        check_fitted(self)
        images = check_images(X, scale=self.train_config_.mask_train_scale)
        gts = [check_instances(y_i, img.shape, index=i)
               for i, (img, y_i) in enumerate(zip(images, y))]
        report = evaluate(self.predict(X), gts)
        return report.ap50

    def evaluate(self, X, y):
        """Full EvalReport on (X, y)."""
        check_fitted(self)
        images = check_images(X, scale=self.train_config_.mask_train_scale)
        gts = [check_instances(y_i, img.shape, index=i)
               for i, (img, y_i) in enumerate(zip(images, y))]
        return evaluate(self.predict(X), gts)

    def __repr__(self):
        changed = []
        defaults = inspect.signature(type(self).__init__).parameters
        for name in self._parameter_names():
            val = getattr(self, name)
            if val != defaults[name].default:
                changed.append(f"{name}={val!r}")
        return f"{type(self).__name__}({', '.join(changed)})"
