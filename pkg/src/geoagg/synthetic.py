"""Synthetic two-primitive scene with known per-point prototypes.

A square patch of the plane z = 0 and a sphere floating above it, each
carrying noisy copies of its own random prototype feature. Used by the demos
and the regression tests as a stand-in for real VLM features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .fpfh import FpfhParams
from .superpoints import unit_rows

# FPFH settings sized for this scene's point spacing (~0.045)
SCENE_FPFH = FpfhParams(m_ref=512, k3=16, k4=32, r1=0.15, r2=0.25)


@dataclass
class Scene:
    cloud: PointCloud
    features: np.ndarray
    prototypes: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels


def two_primitive_scene(n_points: int = 1024, dim: int = 16, noise: float = 0.3,
                        seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    n_plane = n_points // 2
    n_sphere = n_points - n_plane
    plane = np.column_stack([rng.uniform(0, 1, (n_plane, 2)), np.zeros(n_plane)])
    dirs = unit_rows(rng.normal(size=(n_sphere, 3)))
    sphere = np.array([0.5, 0.5, 0.55]) + 0.25 * dirs
    coords = np.vstack([plane, sphere])
    labels = np.repeat([0, 1], [n_plane, n_sphere])

    protos = unit_rows(rng.normal(size=(2, dim)))
    feats = protos[labels] + noise * rng.normal(size=(n_points, dim))
    return Scene(PointCloud(coords, labels), unit_rows(feats), protos)
