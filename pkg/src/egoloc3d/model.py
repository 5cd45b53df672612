"""Joint action recognition and 3-D localization with a latent location.

The video branch maps an observation volume onto the location grid, the
environment branch convolves the descriptor, a per-cell linear head turns
their concatenation into ``p(r | x, e)``, a Gumbel-Softmax draw selects
environment features, and a linear classifier scores actions.

``mode`` selects the variant used in ablations:

``full``           stochastic location sample during training (default)
``deterministic``  the predicted distribution itself pools the environment
``global_env``     uniform pooling weights, no location selection
``video_only``     environment branch replaced by zeros
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import ModelParams, Tensor
from .location_prior import LocationDistribution

MODES = ("full", "deterministic", "global_env", "video_only")


@dataclass
class ModelConfig:
    loc_dims: Tuple[int, int, int]
    obs_channels: int
    env_channels: int
    n_actions: int
    pool: Tuple[int, int, int] = (1, 1, 1)
    hidden: int = 16
    c_phi: int = 16
    c_psi: int = 16
    theta: float = 2.0
    lambda_kl: float = 1.0
    mode: str = "full"
    video_kernel: Tuple[int, int, int] = (3, 3, 3)
    env_kernel: Tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        self.loc_dims = tuple(int(v) for v in self.loc_dims)
        self.pool = tuple(int(v) for v in self.pool)
        self.video_kernel = tuple(int(v) for v in self.video_kernel)
        self.env_kernel = tuple(int(v) for v in self.env_kernel)
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.n_actions < 2:
            raise ValueError("need at least two action classes")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeClip:
    obs: np.ndarray  # (T, X, Y, C_f)
    label: int
    prior: LocationDistribution
    true_position: Optional[Tuple[float, float, float]] = None
    track: Optional[object] = None
    info: dict = field(default_factory=dict)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    c = config
    p = ModelParams()
    kv = c.video_kernel
    p.add("phi.conv1.w", _he(rng, kv + (c.obs_channels, c.hidden), np.prod(kv) * c.obs_channels))
    p.add("phi.conv1.b", np.zeros(c.hidden))
    p.add("phi.conv2.w", _he(rng, (1, 1, 1, c.hidden, c.hidden), c.hidden))
    p.add("phi.conv2.b", np.zeros(c.hidden))
    H = c.loc_dims[2]
    p.add("phi.proj.w", rng.normal(0.0, np.sqrt(1.0 / c.hidden), size=(c.hidden, H * c.c_phi)))
    p.add("phi.proj.b", np.zeros(H * c.c_phi))
    if c.mode != "video_only":
        ke = c.env_kernel
        p.add("psi.conv1.w", _he(rng, (1, 1, 1, c.env_channels, c.hidden), c.env_channels))
        p.add("psi.conv1.b", np.zeros(c.hidden))
        p.add("psi.conv2.w", _he(rng, ke + (c.hidden, c.c_psi), np.prod(ke) * c.hidden))
        p.add("psi.conv2.b", np.zeros(c.c_psi))
    feat = c.c_phi + c.c_psi
    p.add("loc.w", rng.normal(0.0, 0.01, size=(feat, 1)))
    p.add("cls.w", rng.normal(0.0, 0.01, size=(feat, c.n_actions)))
    p.add("cls.b", np.zeros(c.n_actions))
    return p


def zero_params(config: ModelConfig) -> ModelParams:
    p = init_params(config, np.random.default_rng(0))
    for t in p.tensors.values():
        t.value = np.zeros_like(t.value)
    return p


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

def encode_video(obs, params: ModelParams, config: ModelConfig) -> Tensor:
    """Observation ``(T, X, Y, C_f)`` -> features ``(W, D, H, C_phi)``."""
    obs = obs if isinstance(obs, Tensor) else Tensor(obs)
    c = config
    W, D, H = c.loc_dims
    if obs.value.ndim != 4 or obs.shape[3] != c.obs_channels:
        raise ValueError(f"observation shape {obs.shape} does not match {c.obs_channels} channels")
    if (obs.shape[1] // c.pool[0], obs.shape[2] // c.pool[1]) != (W, D) or \
            obs.shape[1] % c.pool[0] or obs.shape[2] % c.pool[1]:
        raise ValueError(f"observation footprint {obs.shape[1:3]} does not pool to {(W, D)}")
    h = dc.relu(dc.conv3d(obs, params["phi.conv1.w"], params["phi.conv1.b"]))
    h = dc.relu(dc.conv3d(h, params["phi.conv2.w"], params["phi.conv2.b"]))
    h = dc.mean_axis(h, 0)
    h = dc.block_avg_pool(h, c.pool[:2])
    h = dc.linear(h, params["phi.proj.w"], params["phi.proj.b"])
    return dc.reshape(h, (W, D, H, c.c_phi))


def encode_env(env_features, params: ModelParams, config: ModelConfig) -> Tensor:
    """Descriptor feature volume ``(X, Y, Z, C_e)`` -> ``(W, D, H, C_psi)``."""
    c = config
    x = env_features if isinstance(env_features, Tensor) else Tensor(env_features)
    if x.value.ndim != 4 or x.shape[3] != c.env_channels:
        raise ValueError(f"environment shape {x.shape} does not match {c.env_channels} channels")
    x = dc.block_avg_pool(x, c.pool)
    if x.shape[:3] != c.loc_dims:
        raise ValueError(f"environment grid pools to {x.shape[:3]}, expected {c.loc_dims}")
    h = dc.relu(dc.conv3d(x, params["psi.conv1.w"], params["psi.conv1.b"]))
    return dc.relu(dc.conv3d(h, params["psi.conv2.w"], params["psi.conv2.b"]))


def _zero_env(config: ModelConfig) -> Tensor:
    return Tensor(np.zeros(config.loc_dims + (config.c_psi,)))


def predict_location(video_feat: Tensor, env_feat: Tensor, params: ModelParams) -> Tensor:
    """``softmax_grid(w_r . (phi ++ psi))`` as a differentiable grid tensor."""
    if video_feat.shape[:3] != env_feat.shape[:3]:
        raise ValueError("video and environment features must share spatial dims")
    z = dc.linear(dc.concat_channels(video_feat, env_feat), params["loc.w"])
    return dc.softmax_grid(dc.reshape(z, video_feat.shape[:3]))


def classify(sample, video_feat: Tensor, env_feat: Tensor, params: ModelParams) -> Tensor:
    """Action logits from pooled video features and location-weighted env features."""
    pooled_env = dc.weighted_avg_pool(env_feat, sample)
    pooled_video = dc.avg_pool_spatial(video_feat)
    f = dc.concat_channels(pooled_video, pooled_env)
    return dc.linear(f, params["cls.w"], params["cls.b"])


def forward(obs, env_features, params: ModelParams, config: ModelConfig):
    vf = encode_video(obs, params, config)
    ef = _zero_env(config) if config.mode == "video_only" else encode_env(env_features, params, config)
    r = predict_location(vf, ef, params)
    return vf, ef, r


def _pooling_weights(r: Tensor, config: ModelConfig, rng, noise, stochastic: bool):
    if config.mode == "global_env":
        n = int(np.prod(config.loc_dims))
        return Tensor(np.full(config.loc_dims, 1.0 / n))
    if config.mode == "deterministic" or not stochastic:
        return r
    return dc.gumbel_softmax(r, config.theta, rng, noise=noise)


def loss_graph(clip: EpisodeClip, env_features, params: ModelParams, config: ModelConfig,
               rng=None, noise=None):
    """Build the scalar training loss; returns ``(loss, ce, kl)`` tensors."""
    prior = clip.prior.probs if isinstance(clip.prior, LocationDistribution) else np.asarray(clip.prior)
    vf, ef, r = forward(clip.obs, env_features, params, config)
    sample = _pooling_weights(r, config, rng, noise, stochastic=True)
    logits = classify(sample, vf, ef, params)
    ce = dc.cross_entropy(logits, clip.label)
    kl = dc.kl_divergence(r, prior)
    loss = dc.add(ce, dc.scale(kl, config.lambda_kl))
    return loss, ce, kl


def training_step(clip: EpisodeClip, env_features, params: ModelParams, config: ModelConfig,
                  rng=None, noise=None):
    """Forward with one location draw, backward into ``params`` grads.

    Returns ``(loss, (ce, kl))`` as floats; gradients are left on ``params``.
    """
    loss, ce, kl = loss_graph(clip, env_features, params, config, rng, noise)
    loss.backward()
    return loss.item(), (ce.item(), kl.item())


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def infer(obs, env_features, params: ModelParams, config: ModelConfig):
    """Deterministic prediction: the expected location replaces the sample.

    Returns ``(label, scores, location)``.
    """
    if isinstance(obs, EpisodeClip):
        obs = obs.obs
    vf, ef, r = forward(obs, env_features, params, config)
    weights = _pooling_weights(r, config, None, None, stochastic=False)
    logits = classify(weights, vf, ef, params).value
    scores = _softmax(logits)
    return int(np.argmax(logits)), scores, LocationDistribution(r.value.copy())


def sampled_class_probability(obs, env_features, params, config, label: int,
                              n_samples: int, rng) -> np.ndarray:
    """Class-``label`` probability under ``n_samples`` Gumbel-Softmax draws."""
    vf, ef, r = forward(obs, env_features, params, config)
    out = np.empty(n_samples)
    for i in range(n_samples):
        s = dc.gumbel_softmax(Tensor(r.value), config.theta, rng)
        logits = classify(s, Tensor(vf.value), Tensor(ef.value), params).value
        out[i] = _softmax(logits)[label]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_INT = ("obs_channels", "env_channels", "n_actions", "hidden", "c_phi", "c_psi")
_CONFIG_VEC = ("loc_dims", "pool", "video_kernel", "env_kernel")


CONFIG_KEYS = frozenset(f"config.{k}" for k in _CONFIG_INT + _CONFIG_VEC
                        + ("theta", "lambda_kl", "mode"))


def params_to_named(params: ModelParams, config: ModelConfig) -> dict:
    named = {}
    for k in _CONFIG_INT:
        named[f"config.{k}"] = np.array([getattr(config, k)], dtype=np.float64)
    for k in _CONFIG_VEC:
        named[f"config.{k}"] = np.array(getattr(config, k), dtype=np.float64)
    named["config.theta"] = np.array([config.theta])
    named["config.lambda_kl"] = np.array([config.lambda_kl])
    named["config.mode"] = np.array([MODES.index(config.mode)], dtype=np.float64)
    for k, t in params.items():
        named[k] = t.value
    return named


def params_from_named(named: dict):
    kw = {k: int(named[f"config.{k}"][0]) for k in _CONFIG_INT}
    kw.update({k: tuple(int(v) for v in named[f"config.{k}"]) for k in _CONFIG_VEC})
    kw["theta"] = float(named["config.theta"][0])
    kw["lambda_kl"] = float(named["config.lambda_kl"][0])
    kw["mode"] = MODES[int(named["config.mode"][0])]
    config = ModelConfig(**kw)
    params = ModelParams()
    for k, v in named.items():
        if not k.startswith("config."):
            params.add(k, np.array(v))
    return params, config
