"""Estimator-style facade over model construction, training, and rendering.

`NovelViewSynthesizer` follows the fit/predict/get_params protocol so it
composes with common tooling (cloning, grid search, pipelines) without any
hard dependency on those libraries.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyInputError, NotFittedError
from .geometry import Pose
from .metrics import psnr
from .pipeline import (
    FwdModel,
    LossConfig,
    ModelConfig,
    evaluate,
    load_model,
    save_model,
    synthesize,
    train,
)
from .scenes import SceneBundle

_PARAM_NAMES = (
    "variant",
    "width",
    "n_heads",
    "n_input_views",
    "steps",
    "lr",
    "seed",
    "train_seed",
    "radius_px",
    "k_blend",
    "depth_mode",
    "lambda_l2",
    "lambda_c",
    "lambda_s",
    "content_loss",
    "depth_prior",
    "stage1_steps",
    "dtype",
)


class NovelViewSynthesizer:
    """Train a view-synthesis model on scene bundles and render new poses."""

    def __init__(self, variant="fwd-d", width=0.25, n_heads=4, n_input_views=3,
                 steps=500, lr=1e-4, seed=0, train_seed=0, radius_px=1.5,
                 k_blend=16, depth_mode="alpha_sum", lambda_l2=5.0, lambda_c=1.0,
                 lambda_s=5.0, content_loss="off", depth_prior=2.0,
                 stage1_steps=0, dtype="float32"):
        self.variant = variant
        self.width = width
        self.n_heads = n_heads
        self.n_input_views = n_input_views
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.train_seed = train_seed
        self.radius_px = radius_px
        self.k_blend = k_blend
        self.depth_mode = depth_mode
        self.lambda_l2 = lambda_l2
        self.lambda_c = lambda_c
        self.lambda_s = lambda_s
        self.content_loss = content_loss
        self.depth_prior = depth_prior
        self.stage1_steps = stage1_steps
        self.dtype = dtype

    # -- parameter protocol -------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def set_params(self, **params) -> "NovelViewSynthesizer":
        unknown = set(params) - set(_PARAM_NAMES)
        if unknown:
            raise ValueError(
                f"invalid parameters {sorted(unknown)} for NovelViewSynthesizer; "
                f"valid parameters are {list(_PARAM_NAMES)}")
        for name, value in params.items():
            setattr(self, name, value)
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            width=self.width,
            n_heads=self.n_heads,
            n_input_views=self.n_input_views,
            radius_px=self.radius_px,
            k_blend=self.k_blend,
            depth_mode=self.depth_mode,
            loss=LossConfig(lambda_l2=self.lambda_l2, lambda_c=self.lambda_c,
                            lambda_s=self.lambda_s, content_loss=self.content_loss),
            lr=self.lr,
            depth_prior=self.depth_prior,
            stage1_steps=self.stage1_steps,
            dtype=self.dtype,
            seed=self.seed,
        )

    # -- estimation protocol --------------------------------------------------

    def fit(self, X, y=None) -> "NovelViewSynthesizer":
        """Train on one SceneBundle or a list of them. y is unused."""
        scenes = self._as_scenes(X)
        self.model_ = FwdModel(self.model_config())
        self.state_ = train(self.model_, scenes, self.steps, seed=self.train_seed)
        self.scenes_ = scenes
        return self

    def predict(self, X) -> list[np.ndarray]:
        """Render poses with the fitted model.

        X may be a Pose, a list of Poses (rendered against the first fitted
        scene), or a list of (SceneBundle, Pose) pairs.
        """
        self._check_fitted()
        items = X if isinstance(X, (list, tuple)) else [X]
        if not items:
            raise EmptyInputError("predict received no poses")
        out = []
        for item in items:
            if isinstance(item, Pose):
                scene, pose = self.scenes_[0], item
            else:
                scene, pose = item
            image, _aux = synthesize(self.model_, scene, pose)
            out.append(np.clip(image, 0.0, 1.0))
        return out

    def score(self, X, y=None) -> float:
        """Mean held-out PSNR (dB) over the bundles' non-input views."""
        self._check_fitted()
        scenes = self._as_scenes(X)
        rows = evaluate(self.model_, scenes, min_timed_renders=1)
        return float(np.mean([row["psnr_db"] for row in rows]))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_model(path, self.model_, self.state_)

    def load(self, path) -> "NovelViewSynthesizer":
        """Load a checkpoint into this estimator (returns self)."""
        model, state = load_model(path)
        cfg = model.cfg
        self.set_params(
            variant=cfg.variant, width=cfg.width, n_heads=cfg.n_heads,
            n_input_views=cfg.n_input_views, radius_px=cfg.radius_px,
            k_blend=cfg.k_blend, depth_mode=cfg.depth_mode,
            lambda_l2=cfg.loss.lambda_l2, lambda_c=cfg.loss.lambda_c,
            lambda_s=cfg.loss.lambda_s, content_loss=cfg.loss.content_loss,
            lr=cfg.lr, depth_prior=cfg.depth_prior,
            stage1_steps=cfg.stage1_steps, dtype=cfg.dtype, seed=cfg.seed)
        self.model_ = model
        self.state_ = state
        self.scenes_ = []
        return self

    # -- helpers ----------------------------------------------------------------

    @staticmethod
    def _as_scenes(X) -> list[SceneBundle]:
        scenes = X if isinstance(X, (list, tuple)) else [X]
        scenes = list(scenes)
        if not scenes:
            raise EmptyInputError("expected at least one scene bundle")
        for s in scenes:
            if not isinstance(s, SceneBundle):
                raise TypeError(f"expected SceneBundle, got {type(s).__name__}")
        return scenes

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("estimator is not fitted; call fit or load first")

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in _PARAM_NAMES)
        return f"NovelViewSynthesizer({args})"
