"""Synthetic "Gaussian mixture of objects" point-set scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

N_TYPES = 5
MODES_PER_SCENE = 3
POINTS_PER_MODE = 128


@dataclass(frozen=True)
class SceneSpec:
    means: np.ndarray  # (n_types, 2)
    variance: float = 0.25
    modes_per_scene: int = MODES_PER_SCENE
    points_per_mode: int = POINTS_PER_MODE
    sampling: str = "gaussian"  # or "disk"

    def __post_init__(self) -> None:
        means = np.array(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 2:
            raise ContractError("means must be (n_types, 2)")
        if self.variance < 0:
            raise ContractError("variance must be nonnegative")
        if not 1 <= self.modes_per_scene <= len(means):
            raise ContractError("modes_per_scene must be between 1 and the number of types")
        if self.sampling not in ("gaussian", "disk"):
            raise ContractError(f"unknown sampling mode {self.sampling!r}")
        means.flags.writeable = False
        object.__setattr__(self, "means", means)

    @property
    def n_types(self) -> int:
        return len(self.means)

    @property
    def n_points(self) -> int:
        return self.modes_per_scene * self.points_per_mode

    def min_separation(self) -> float:
        diff = self.means[:, None, :] - self.means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        return float(dist[np.triu_indices(len(self.means), 1)].min())

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "variance": self.variance,
            "modes_per_scene": self.modes_per_scene,
            "points_per_mode": self.points_per_mode,
            "sampling": self.sampling,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        return cls(
            np.asarray(data["means"], dtype=np.float64),
            float(data["variance"]),
            int(data["modes_per_scene"]),
            int(data["points_per_mode"]),
            data.get("sampling", "gaussian"),
        )


@dataclass
class Scene:
    points: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,) type ids
    active_types: tuple[int, ...]


def make_scene_spec(
    seed: int,
    radius: float = 5.0,
    variance: float = 0.25,
    jitter: float = 0.3,
    sampling: str = "gaussian",
) -> SceneSpec:
    """Five type means on a circle, each angle jittered by at most ``jitter`` rad.

    With the defaults neighbouring means stay at least
    ``2 r sin((2 pi / 5 - 2 jitter) / 2) ~ 3.2`` apart.
    """
    rng = np.random.default_rng(seed)
    base = 2.0 * math.pi * np.arange(N_TYPES) / N_TYPES
    angles = base + rng.uniform(-jitter, jitter, N_TYPES)
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    spec = SceneSpec(means, variance, sampling=sampling)
    if variance > 0 and spec.min_separation() < 4.0 * math.sqrt(variance):
        raise ContractError("type means are not separated by 4 standard deviations")
    return spec


def gen_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    active = np.sort(rng.choice(spec.n_types, size=spec.modes_per_scene, replace=False))
    n = spec.points_per_mode
    labels = np.repeat(active, n)
    centers = spec.means[labels]
    sd = math.sqrt(spec.variance)
    if spec.sampling == "gaussian":
        offsets = rng.standard_normal((len(labels), 2)) * sd
    else:
        # uniform on a disk with the same per-axis variance (r_max^2 / 4 = var)
        r = 2.0 * sd * np.sqrt(rng.random(len(labels)))
        theta = rng.uniform(0.0, 2.0 * math.pi, len(labels))
        offsets = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    order = rng.permutation(len(labels))
    return Scene((centers + offsets)[order], labels[order].astype(np.int64), tuple(int(a) for a in active))


def gen_dataset(spec: SceneSpec, M: int, seed: int) -> list[Scene]:
    """M scenes from per-scene child seeds of one master seed."""
    if M < 1:
        raise ContractError(f"need at least one scene, got {M}")
    children = np.random.SeedSequence(seed).spawn(M)
    return [gen_scene(spec, np.random.default_rng(child)) for child in children]


def stack_points(scenes: list[Scene]) -> np.ndarray:
    return np.stack([s.points for s in scenes])


def stack_labels(scenes: list[Scene]) -> np.ndarray:
    return np.stack([s.labels for s in scenes])
