"""Run configuration: one flat record covering every pipeline stage.

Matching defaults are the published operating point: similarity scale 0.08,
confidence threshold 0.4, fine window 5, three coarse and one fine
attention layer, and a 9x9 sub-pixel refinement window.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .scene import NoiseModel


@dataclass
class RunConfig:
    seed: int = 1

    # scene synthesis
    n_points: int = 200
    n_views: int = 12            # reconstruction views
    n_query_views: int = 6       # held-out views appended after the recon views
    fine_noise_sigma: float = 0.0
    descriptor_noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    outlier_rate: float = 0.0
    image_size: int = 512
    focal: float = 640.0
    distance_min: float = 3.0
    distance_max: float = 5.0
    jitter_deg: float = 10.0
    coarse_dim: int = 32
    fine_dim: int = 32

    # reconstruction
    min_track_length: int = 3
    max_reproj_px: float = 12.0
    min_refine_confidence: float = 0.2
    refine_window: int = 9

    # 2D-3D matching
    tau: float = 0.08
    theta: float = 0.4
    fine_window: int = 5
    n_coarse_layers: int = 3
    n_fine_layers: int = 1

    # pose solving (inlier_px is specified at 512-px image width and scaled)
    inlier_px: float = 3.0
    ransac_max_iters: int = 10000
    ransac_confidence: float = 0.99

    # evaluation
    units_to_cm: float = 10.0

    def validate(self) -> None:
        if self.n_points < 8:
            raise ValueError("n_points must be at least 8")
        if self.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if self.n_query_views < 0:
            raise ValueError("n_query_views must be non-negative")
        if self.refine_window % 2 != 1 or self.fine_window % 2 != 1:
            raise ValueError("windows must be odd")
        if self.image_size % 8 != 0:
            raise ValueError("image_size must be divisible by the grid stride (8)")
        if not 0 < self.tau:
            raise ValueError("tau must be positive")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must be in [0, 1]")
        NoiseModel(
            fine_noise_sigma=self.fine_noise_sigma,
            descriptor_noise_sigma=self.descriptor_noise_sigma,
            dropout_rate=self.dropout_rate,
            outlier_rate=self.outlier_rate,
        )
        if self.distance_min <= 0 or self.distance_max < self.distance_min:
            raise ValueError("invalid camera distance range")

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(
            fine_noise_sigma=self.fine_noise_sigma,
            descriptor_noise_sigma=self.descriptor_noise_sigma,
            dropout_rate=self.dropout_rate,
            outlier_rate=self.outlier_rate,
        )

    @property
    def total_views(self) -> int:
        return self.n_views + self.n_query_views

    @property
    def scaled_inlier_px(self) -> float:
        return self.inlier_px * self.image_size / 512.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
