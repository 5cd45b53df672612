"""scikit-learn style wrappers around voxelization, priors and the joint model."""
from __future__ import annotations

import math
from typing import Callable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import diffcore as dc
from . import model as M
from .location_prior import DEFAULT_SIGMA, LocationDistribution, downsample_distribution, make_prior
from .mesh_env import (GridSpec, build_ground_plane, build_hvr, build_semvoxel, descriptor_features)
from .validation import check_env, check_labels, check_observations, check_priors

KINDS = ("hvr", "semvoxel", "ground")


class EnvironmentEncoder(TransformerMixin, BaseEstimator):
    """Rasterize semantic meshes into environment descriptors.

    When ``origin`` or ``extents`` is left as ``None`` the grid is fitted to the
    bounding box of the meshes seen in ``fit``.
    """

    def __init__(self, kind="hvr", dims=(28, 28, 8), M=4, origin=None, extents=None):
        self.kind = kind
        self.dims = dims
        self.M = M
        self.origin = origin
        self.extents = extents

    def fit(self, meshes, y=None):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        meshes = _as_list(meshes)
        if self.origin is None or self.extents is None:
            pts = np.concatenate([m.vertices for m in meshes])
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            origin = lo if self.origin is None else np.asarray(self.origin, float)
            extents = np.maximum(hi - origin, 1e-9) if self.extents is None else self.extents
        else:
            origin, extents = self.origin, self.extents
        self.grid_ = GridSpec(tuple(origin), tuple(extents), tuple(self.dims), self.M)
        return self

    def transform(self, meshes):
        check_is_fitted(self, "grid_")
        out = []
        for m in _as_list(meshes):
            if self.kind == "hvr":
                out.append(build_hvr(m, self.grid_))
            elif self.kind == "semvoxel":
                out.append(build_semvoxel(m, self.grid_))
            else:
                out.append(build_ground_plane(build_semvoxel(m, self.grid_)))
        return out


class LocationPriorEncoder(TransformerMixin, BaseEstimator):
    """Camera tracks -> stacked location priors ``(n, X, Y, Z)``."""

    def __init__(self, grid: Optional[GridSpec] = None, sigma=DEFAULT_SIGMA):
        self.grid = grid
        self.sigma = sigma

    def fit(self, tracks=None, y=None):
        if not isinstance(self.grid, GridSpec):
            raise ValueError("grid must be a GridSpec")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.dims_ = self.grid.dims
        return self

    def transform(self, tracks):
        check_is_fitted(self, "dims_")
        return np.stack([make_prior(t, self.grid, self.sigma).probs for t in tracks])


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


class JointActionLocalizer(ClassifierMixin, BaseEstimator):
    """Action classifier with a latent 3-D action location.

    ``fit`` takes observations ``X`` of shape ``(n, T, X, Y, C_f)``, labels, the
    environment descriptor and optional per-clip location priors on the parent
    grid (uniform when omitted). Training is single-clip SGD with momentum and
    a cosine learning-rate decay.

    Parameters
    ----------
    mode : {"full", "deterministic", "global_env", "video_only"}
        Model variant; see :mod:`egoloc3d.model`.
    theta : float
        Gumbel-Softmax temperature.
    lambda_kl : float
        Weight of the KL term matching the predicted location to the prior.
    pool : tuple of int
        Pooling factors from the parent grid to the location grid.
    n_epochs : float
        Passes over the training clips; fractional values truncate the last pass.
    max_grad_norm : float or None
        Global gradient-norm clip applied before each update.
    """

    def __init__(self, mode="full", theta=2.0, lambda_kl=1.0, hidden=16, c_phi=16, c_psi=16,
                 pool=(1, 1, 1), lr=0.01, momentum=0.9, weight_decay=0.0, n_epochs=8.0,
                 max_grad_norm=5.0, cosine=True, n_actions=None, random_state=0,
                 callback: Optional[Callable[[dict], None]] = None):
        self.mode = mode
        self.theta = theta
        self.lambda_kl = lambda_kl
        self.hidden = hidden
        self.c_phi = c_phi
        self.c_psi = c_psi
        self.pool = pool
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.n_epochs = n_epochs
        self.max_grad_norm = max_grad_norm
        self.cosine = cosine
        self.n_actions = n_actions
        self.random_state = random_state
        self.callback = callback

    # -- configuration -----------------------------------------------------

    def _make_config(self, X, env_feat, n_classes) -> M.ModelConfig:
        pool = tuple(int(p) for p in self.pool)
        gx, gy, gz = env_feat.shape[:3]
        if gx % pool[0] or gy % pool[1] or gz % pool[2]:
            raise ValueError(f"pool {pool} does not divide the environment grid {(gx, gy, gz)}")
        return M.ModelConfig(
            loc_dims=(gx // pool[0], gy // pool[1], gz // pool[2]),
            obs_channels=X.shape[-1], env_channels=env_feat.shape[-1], n_actions=n_classes,
            pool=pool, hidden=self.hidden, c_phi=self.c_phi, c_psi=self.c_psi,
            theta=self.theta, lambda_kl=self.lambda_kl, mode=self.mode)

    def _pool_priors(self, priors):
        pool = tuple(int(p) for p in self.pool)
        if pool == (1, 1, 1):
            return priors
        return np.stack([downsample_distribution(LocationDistribution(p), *pool).probs
                         for p in priors])

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y, *, env, priors=None):
        X = check_observations(X)
        env = check_env(env)
        n = len(X)
        n_classes = int(self.n_actions) if self.n_actions is not None else int(np.max(y)) + 1
        y = check_labels(y, n, n_classes)
        env_feat = descriptor_features(env)
        priors = check_priors(priors, n, env_feat.shape[:3])
        priors = self._pool_priors(priors)

        config = self._make_config(X, env_feat, n_classes)
        rng = dc.make_rng(self.random_state)
        params = M.init_params(config, rng)
        total = int(math.floor(self.n_epochs * n))
        order = np.concatenate([rng.permutation(n) for _ in range(max(1, math.ceil(self.n_epochs)))])
        history = []
        for step in range(total):
            i = int(order[step])
            clip = M.EpisodeClip(X[i], int(y[i]), LocationDistribution(priors[i]))
            lr = dc.cosine_lr(self.lr, step, total) if self.cosine else self.lr
            loss, (ce, kl) = M.training_step(clip, env_feat, params, config, rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            dc.sgd_step(params, lr, self.momentum, self.weight_decay, self.max_grad_norm)
            rec = {"step": step, "loss": loss, "ce": ce, "kl": kl, "lr": lr}
            history.append(rec)
            if self.callback is not None:
                self.callback(rec)

        self.config_ = config
        self.params_ = params
        self.env_ = env
        self.env_features_ = env_feat
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes
        self.history_ = history
        return self

    @classmethod
    def from_params(cls, params: dc.ModelParams, config: M.ModelConfig, env=None, **kw):
        """Wrap existing weights (e.g. a loaded checkpoint) as a fitted estimator."""
        est = cls(mode=config.mode, theta=config.theta, lambda_kl=config.lambda_kl,
                  hidden=config.hidden, c_phi=config.c_phi, c_psi=config.c_psi,
                  pool=config.pool, n_actions=config.n_actions, **kw)
        est.config_ = config
        est.params_ = params
        est.env_ = env
        est.env_features_ = None if env is None else descriptor_features(env)
        est.classes_ = np.arange(config.n_actions)
        est.n_classes_ = config.n_actions
        est.history_ = []
        est.extra_ = {}
        return est

    # -- inference ---------------------------------------------------------

    def _env_features(self, env):
        if env is None:
            if self.env_features_ is None:
                raise ValueError("no environment given and none stored at fit time")
            return self.env_features_
        return descriptor_features(check_env(env))

    def predict_all(self, X, env=None, n_jobs: int = 1):
        """Returns ``(labels, scores, locations)`` from deterministic inference."""
        check_is_fitted(self, "params_")
        X = check_observations(X)
        feat = self._env_features(env)
        if n_jobs == 1:
            res = [M.infer(x, feat, self.params_, self.config_) for x in X]
        else:
            from joblib import Parallel, delayed
            res = Parallel(n_jobs=n_jobs, prefer="threads")(
                delayed(M.infer)(x, feat, self.params_, self.config_) for x in X)
        labels = np.array([r[0] for r in res], dtype=np.int64)
        scores = np.stack([r[1] for r in res])
        locs: List[LocationDistribution] = [r[2] for r in res]
        return labels, scores, locs

    def predict(self, X, env=None):
        return self.predict_all(X, env)[0]

    def predict_proba(self, X, env=None):
        return self.predict_all(X, env)[1]

    def predict_location(self, X, env=None) -> List[LocationDistribution]:
        return self.predict_all(X, env)[2]

    # -- persistence -------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> None:
        """Write an ``HVRP`` checkpoint; ``extra`` adds named arrays (``config.*``)."""
        check_is_fitted(self, "params_")
        named = M.params_to_named(self.params_, self.config_)
        for k, v in (extra or {}).items():
            named[k] = np.asarray(v, dtype=np.float64)
        with open(path, "wb") as fh:
            dc.save_tensors(named, fh)

    @classmethod
    def load(cls, path, env=None) -> "JointActionLocalizer":
        with open(path, "rb") as fh:
            named = dc.load_tensors(fh)
        params, config = M.params_from_named(named)
        est = cls.from_params(params, config, env)
        est.extra_ = {k: v for k, v in named.items()
                      if k.startswith("config.") and k not in M.CONFIG_KEYS}
        return est
