"""scikit-learn style wrapper around the training loop.

``X`` rows are ``(tx_x, tx_y, tx_z, freq_hz)``; ``y`` holds the matching
normalised PAS images, shape ``(n, H, W)``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import network
from .gaussians import init_from_points, sample_scene_points
from .metrics import WIN
from .renderer import RenderConfig
from .scene import Scene, load_scene
from .training import (FieldModel, History, TrainConfig, TrainState, evaluate_images, fit_loop,
                       load_checkpoint, save_checkpoint)


def check_X(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.shape[0] == 4:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != 4:
        raise ValueError(f"X must have shape (n, 4) = (tx_x, tx_y, tx_z, freq), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if np.any(X[:, 3] <= 0):
        raise ValueError("frequencies must be > 0")
    return X


def check_X_y(X, y, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    X = check_X(X)
    y = np.asarray(y, dtype=float)
    if y.shape != (len(X), H, W):
        raise ValueError(f"y must have shape ({len(X)}, {H}, {W}), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    if y.min(initial=0.0) < 0.0 or y.max(initial=0.0) > 1.0:
        raise ValueError("y must hold normalised images in [0, 1]")
    if len(X) == 0:
        raise ValueError("need at least one training sample")
    return X, y


class WidebandGaussianField(RegressorMixin, BaseEstimator):
    """Gaussian field plus EM feature network fitted to PAS images.

    Parameters mirror :class:`TrainConfig` and :class:`EncodingConfig`;
    ``scene`` is a :class:`Scene` or a path to a scene file and supplies the
    RX pose, the normalisation bounds and the initial point cloud.
    """

    def __init__(self, scene=None, W=360, H=90, n_surface=2000, n_volume=500, iterations=2000,
                 lam=0.2, lr_position=2e-4, lr_scale=5e-3, lr_rotation=1e-3, lr_delta=5e-2,
                 lr_net=1e-3, densify_interval=100, densify_until=-1, densify_grad_threshold=2e-4,
                 scale_split_fraction=0.05, prune_threshold=0.005, reset_interval=3000,
                 render_mode="alpha", loss_log_window=7500, L_pos=10, L_freq=6, att_width=128,
                 att_depth=3, h_dim=64, rad_width=64, rad_depth=2, seed=0):
        self.scene = scene
        self.W = W
        self.H = H
        self.n_surface = n_surface
        self.n_volume = n_volume
        self.iterations = iterations
        self.lam = lam
        self.lr_position = lr_position
        self.lr_scale = lr_scale
        self.lr_rotation = lr_rotation
        self.lr_delta = lr_delta
        self.lr_net = lr_net
        self.densify_interval = densify_interval
        self.densify_until = densify_until
        self.densify_grad_threshold = densify_grad_threshold
        self.scale_split_fraction = scale_split_fraction
        self.prune_threshold = prune_threshold
        self.reset_interval = reset_interval
        self.render_mode = render_mode
        self.loss_log_window = loss_log_window
        self.L_pos = L_pos
        self.L_freq = L_freq
        self.att_width = att_width
        self.att_depth = att_depth
        self.h_dim = h_dim
        self.rad_width = rad_width
        self.rad_depth = rad_depth
        self.seed = seed

    # configuration --------------------------------------------------------

    def _scene(self) -> Scene:
        if self.scene is None:
            raise ValueError("scene is required (RX pose and bounds come from it)")
        if isinstance(self.scene, Scene):
            return self.scene
        return load_scene(Path(self.scene))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam, iterations=self.iterations, lr_position=self.lr_position,
            lr_scale=self.lr_scale, lr_rotation=self.lr_rotation, lr_delta=self.lr_delta,
            lr_net=self.lr_net, densify_interval=self.densify_interval,
            densify_until=self.densify_until, densify_grad_threshold=self.densify_grad_threshold,
            scale_split_fraction=self.scale_split_fraction, prune_threshold=self.prune_threshold,
            reset_interval=self.reset_interval, seed=self.seed, render_mode=self.render_mode,
            loss_log_window=self.loss_log_window)

    def init_state(self) -> TrainState:
        """Fresh model and optimiser state (no training)."""
        if self.W < WIN or self.H < WIN:
            raise ValueError(f"W and H must be at least {WIN}")
        scene = self._scene()
        cfg = self.train_config()
        pts = sample_scene_points(scene, self.n_surface, self.n_volume, seed=self.seed)
        cloud = init_from_points(pts, seed=self.seed)
        enc = network.EncodingConfig(
            lo=tuple(float(v) for v in scene.lo), hi=tuple(float(v) for v in scene.hi),
            L_pos=self.L_pos, L_freq=self.L_freq, att_width=self.att_width,
            att_depth=self.att_depth, h_dim=self.h_dim, rad_width=self.rad_width,
            rad_depth=self.rad_depth)
        net = network.init_params(enc, seed=self.seed)
        model = FieldModel(cloud, net, scene.rx, self.W, self.H, RenderConfig(mode=self.render_mode))
        return TrainState(model, cfg, scene.extent)

    # estimator API --------------------------------------------------------

    def fit(self, X, y, callback=None):
        X, y = check_X_y(X, y, self.W, self.H)
        self.state_ = self.init_state()
        self.history_ = fit_loop(self.state_, X, y, self.iterations, History(), callback)
        self.n_features_in_ = 4
        return self

    def partial_fit(self, X, y, iterations: int, callback=None):
        """Continue training for ``iterations`` more steps (initialises on first call)."""
        X, y = check_X_y(X, y, self.W, self.H)
        if not hasattr(self, "state_"):
            self.state_ = self.init_state()
            self.history_ = History()
            self.n_features_in_ = 4
        fit_loop(self.state_, X, y, iterations, self.history_, callback)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit() or load() first")

    @property
    def model_(self) -> FieldModel:
        self._check_fitted()
        return self.state_.model

    def predict(self, X) -> np.ndarray:
        """Rendered normalised PAS, shape ``(n, H, W)``."""
        self._check_fitted()
        X = check_X(X)
        m = self.state_.model
        out = np.empty((len(X), m.H, m.W))
        for i, x in enumerate(X):
            out[i] = m.render(x[:3], x[3])
        return out

    def score(self, X, y, sample_weight=None) -> float:
        """Mean SSIM between predictions and ``y``."""
        self._check_fitted()
        m = self.state_.model
        X, y = check_X_y(X, y, m.W, m.H)
        rep = evaluate_images(X[:, 3], self.predict(X), y)
        if sample_weight is None:
            return rep.mean_ssim
        s = np.array([v for _, v in rep.per_sample])
        return float(np.average(s, weights=sample_weight))

    def evaluate(self, X, y):
        """Per-frequency SSIM report (see :class:`EvalReport`)."""
        self._check_fitted()
        X = check_X(X)
        return evaluate_images(X[:, 3], self.predict(X), y)

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path) -> "WidebandGaussianField":
        state = load_checkpoint(path)
        cfg, m = state.config, state.model
        enc = m.net.config
        est = cls(
            scene=None, W=m.W, H=m.H, iterations=cfg.iterations, lam=cfg.lam,
            lr_position=cfg.lr_position, lr_scale=cfg.lr_scale, lr_rotation=cfg.lr_rotation,
            lr_delta=cfg.lr_delta, lr_net=cfg.lr_net, densify_interval=cfg.densify_interval,
            densify_until=cfg.densify_until, densify_grad_threshold=cfg.densify_grad_threshold,
            scale_split_fraction=cfg.scale_split_fraction, prune_threshold=cfg.prune_threshold,
            reset_interval=cfg.reset_interval, render_mode=cfg.render_mode,
            loss_log_window=cfg.loss_log_window, L_pos=enc.L_pos, L_freq=enc.L_freq,
            att_width=enc.att_width, att_depth=enc.att_depth, h_dim=enc.h_dim,
            rad_width=enc.rad_width, rad_depth=enc.rad_depth, seed=cfg.seed)
        est.state_ = state
        est.history_ = History()
        est.n_features_in_ = 4
        return est
