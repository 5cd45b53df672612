"""Procedural worlds and action episodes in which location context matters.

Every action class is tied to one object class: its episodes happen inside a
random instance of that object. Observations are top-down activity maps with
two kinds of channel: the action's appearance code, present over the whole
frame, and a marker channel lit on the camera wearer's ``(x, y)`` column.
Gaussian noise is added everywhere. Height is never observed, and classes in
a confusable pair share one appearance code. An observation therefore tells
*which pair* and *which column*. Telling the two classes of a pair apart, or
recovering the height, needs the environment map at that location.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .location_prior import CameraTrack, LocationDistribution, make_prior
from .mesh_env import (EnvDescriptor, GridSpec, SemanticMesh, build_affordance, build_ground_plane,
                       build_hvr, build_semvoxel)
from .model import EpisodeClip


def default_grid() -> GridSpec:
    return GridSpec(origin=(0.0, 0.0, 0.0), extents=(3.0, 3.0, 1.0), dims=(12, 12, 4), M=2)


@dataclass
class SynthConfig:
    seed: int = 0
    grid: GridSpec = field(default_factory=default_grid)
    num_classes: int = 9
    num_actions: int = 8
    num_objects: int = 12
    n_train: int = 2000
    n_test: int = 500
    sigma_obs: float = 0.1
    rho: float = 1.0
    p_drop: float = 0.0
    n_frames: int = 4
    vertices_per_object: int = 200
    prior_sigma: float = 1.0
    key_frames: int = 2
    registration_noise: float = 0.0  # key-frame jitter std, parent voxels
    max_box: Tuple[int, int, int] = (2, 2, 1)
    split: str = "seen"

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.p_drop <= 1.0):
            raise ValueError("rho and p_drop must lie in [0, 1]")
        if self.rho > 0 and self.num_actions % 2:
            raise ValueError("num_actions must be even when rho > 0")
        if self.num_actions < 2 or self.num_classes < 2:
            raise ValueError("need >= 2 actions and >= 2 classes")
        if self.vertices_per_object < 50:
            raise ValueError("vertices_per_object must be >= 50")
        if self.split not in ("seen", "unseen"):
            raise ValueError("split must be 'seen' or 'unseen'")
        if self.num_objects < min(self.num_actions, self.num_classes - 1):
            raise ValueError("num_objects too small to give every action a context object")

    @property
    def n_pairs(self) -> int:
        return int(round(self.rho * self.num_actions / 2))

    @property
    def obs_channels(self) -> int:
        # appearance codes + one position marker
        return self.num_actions + 1

    def context_class(self, action: int) -> int:
        return 1 + action % (self.num_classes - 1)

    def object_level(self, cls: int, height: int) -> int:
        """Lowest parent level of a box of class ``cls``."""
        return 0 if cls % 2 else self.grid.dims[2] - height

    def appearance(self, action: int) -> int:
        """Appearance code; the two classes of a confusable pair share one."""
        P = self.n_pairs
        if action < 2 * P:
            return action // 2
        return P + (action - 2 * P)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "grid"}
        d["max_box"] = list(self.max_box)
        d["grid"] = {"origin": list(self.grid.origin), "extents": list(self.grid.extents),
                     "dims": list(self.grid.dims), "M": self.grid.M}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        g = d.pop("grid")
        d["max_box"] = tuple(d.get("max_box", (2, 2, 1)))
        return cls(grid=GridSpec(g["origin"], g["extents"], g["dims"], g["M"]), **d)


@dataclass
class SynthWorld:
    mesh: SemanticMesh
    placements: List[Tuple[int, np.ndarray, np.ndarray]]  # (class, lo, hi) in meters
    grid: GridSpec

    def instances_of(self, cls: int) -> List[int]:
        return [i for i, (c, _, _) in enumerate(self.placements) if c == cls]


def generate_world(config: SynthConfig, rng: Optional[np.random.Generator] = None) -> SynthWorld:
    """Axis-aligned boxes snapped to the parent grid, with disjoint footprints.

    Odd classes rest on the floor and even classes sit against the top of the
    volume, so the two context objects of a confusable pair differ in height.
    The first ``C - 1`` objects cycle through every object class so each action
    has a context object; any further objects get random classes.
    """
    if rng is None:
        rng = np.random.default_rng(_streams(config.seed)[0])
    grid = config.grid
    X, Y, Z = grid.dims
    size = grid.parent_size
    origin = np.asarray(grid.origin)
    C = config.num_classes
    taken = np.zeros((X, Y), dtype=bool)
    placements = []
    attempts = 0
    for i in range(config.num_objects):
        cls = 1 + i % (C - 1) if i < C - 1 else int(rng.integers(1, C))
        while True:
            attempts += 1
            if attempts > 1000:
                raise RuntimeError(f"could not place {config.num_objects} objects in grid {grid.dims}")
            w, d, h = (int(rng.integers(1, min(m, n) + 1)) for m, n in zip(config.max_box, (X, Y, Z)))
            x0 = int(rng.integers(0, X - w + 1))
            y0 = int(rng.integers(0, Y - d + 1))
            z0 = config.object_level(cls, h)
            if not taken[x0:x0 + w, y0:y0 + d].any():
                break
        taken[x0:x0 + w, y0:y0 + d] = True
        lo = origin + size * np.array([x0, y0, z0])
        hi = origin + size * np.array([x0 + w, y0 + d, z0 + h])
        placements.append((cls, lo, hi))
    verts, labels = [], []
    for cls, lo, hi in placements:
        verts.append(rng.uniform(lo, hi, size=(config.vertices_per_object, 3)))
        labels.append(np.full(config.vertices_per_object, cls))
    mesh = SemanticMesh(np.concatenate(verts), np.concatenate(labels), C)
    return SynthWorld(mesh, placements, grid)


def render_observation(config: SynthConfig, action: int, column: Tuple[int, int],
                       rng: np.random.Generator) -> np.ndarray:
    X, Y, _ = config.grid.dims
    obs = np.zeros((config.n_frames, X, Y, config.obs_channels))
    obs[..., config.appearance(action)] = 1.0
    obs[:, column[0], column[1], -1] = 1.0
    if config.sigma_obs > 0:
        obs += rng.normal(0.0, config.sigma_obs, size=obs.shape)
    return obs


def generate_episode(world: SynthWorld, config: SynthConfig, rng: np.random.Generator) -> EpisodeClip:
    action = int(rng.integers(config.num_actions))
    candidates = world.instances_of(config.context_class(action))
    _, lo, hi = world.placements[candidates[int(rng.integers(len(candidates)))]]
    position = rng.uniform(lo, hi)
    grid = world.grid
    idx, _ = grid.voxel_index(position)
    column = (int(idx[0, 0]), int(idx[0, 1]))
    obs = render_observation(config, action, column, rng)
    if rng.random() < config.p_drop:
        track = CameraTrack([])
    else:
        upper = np.asarray(grid.origin) + np.asarray(grid.extents)
        frames = []
        for k in range(config.key_frames):
            jitter = rng.normal(0.0, config.registration_noise, size=3) * grid.parent_size
            p = np.clip(position + jitter, grid.origin, upper)
            frames.append((8 * k, tuple(float(v) for v in p)))
        track = CameraTrack(frames)
    prior = make_prior(track, grid, config.prior_sigma)
    return EpisodeClip(obs, action, prior, tuple(float(v) for v in position), track)


def _streams(seed: int):
    """World, train, test and unseen-world seed streams."""
    return np.random.SeedSequence(int(seed)).spawn(4)


def _episodes(world, config, seed_seq: np.random.SeedSequence, n: int) -> List[EpisodeClip]:
    return [generate_episode(world, config, np.random.default_rng(s)) for s in seed_seq.spawn(n)]


def build_descriptors(world: SynthWorld, config: SynthConfig, train=None) -> dict:
    sem = build_semvoxel(world.mesh, config.grid)
    out = {
        "hvr": build_hvr(world.mesh, config.grid),
        "semvoxel": sem,
        "ground": build_ground_plane(sem),
    }
    if train is not None:
        out["affordance"] = build_affordance(train, config.grid, config.num_actions)
    return out


@dataclass
class SynthSplit:
    train: List[EpisodeClip]
    test: List[EpisodeClip]
    world: SynthWorld
    test_world: SynthWorld
    descriptors: dict
    test_descriptors: dict


def generate_split(config: SynthConfig) -> SynthSplit:
    """Train and test episodes; ``unseen`` draws the test set in a fresh world."""
    s_world, s_train, s_test, s_world2 = _streams(config.seed)
    world = generate_world(config, np.random.default_rng(s_world))
    train = _episodes(world, config, s_train, config.n_train)
    if config.split == "unseen":
        test_world = generate_world(config, np.random.default_rng(s_world2))
    else:
        test_world = world
    test = _episodes(test_world, config, s_test, config.n_test)
    desc = build_descriptors(world, config, train)
    test_desc = desc if test_world is world else build_descriptors(test_world, config, None)
    if test_world is not world:
        # affordance maps are learned from training episodes only
        test_desc["affordance"] = EnvDescriptor(config.grid, desc["affordance"].kind,
                                                desc["affordance"].data, None, {})
    return SynthSplit(train, test, world, test_world, desc, test_desc)


def with_overrides(config: SynthConfig, **kw) -> SynthConfig:
    return replace(config, **kw)
