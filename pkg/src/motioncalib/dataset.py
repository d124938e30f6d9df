"""In-memory calibration dataset: per-motion scans, matches and trackers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .cam_odom import FeatureMatches
from .geometry import CameraModel, PointCloud, RigidMotion


class Tracker(Protocol):
    """Follows pixels from the first image of a motion into the second.

    ``track`` takes an (N, 2) pixel array and returns the tracked (N, 2)
    pixels together with a boolean mask of successful tracks. Successful
    tracks always lie inside the image.
    """

    def track(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True, eq=False)
class MotionRecord:
    id: str
    scan_from: PointCloud
    scan_to: PointCloud | None
    matches: FeatureMatches
    tracker: Tracker
    kind: str = ""
    lidar_motion: RigidMotion | None = None
    match_pixels: tuple | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    camera: CameraModel
    motions: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "motions", tuple(self.motions))

    def __len__(self):
        return len(self.motions)

    @property
    def ids(self):
        return [m.id for m in self.motions]

    def select(self, ids):
        by_id = {m.id: m for m in self.motions}
        return replace(self, motions=tuple(by_id[i] for i in ids))

    def with_lidar_motions(self, motions):
        recs = [replace(rec, lidar_motion=m) for rec, m in zip(self.motions, motions)]
        return replace(self, motions=tuple(recs))

    def sample_motions(self, n, seed):
        """Random subset of ``n`` horizontal plus ``n`` vertical motions.

        Without horizontal/vertical labels, ``2 n`` motions are drawn from all.
        """
        rng = np.random.default_rng(seed)
        kinds = {}
        for m in self.motions:
            kinds.setdefault(m.kind, []).append(m.id)
        if set(kinds) <= {"horizontal", "vertical"} and len(kinds) == 2:
            chosen = []
            for kind in ("horizontal", "vertical"):
                ids = kinds[kind]
                chosen += [ids[i] for i in sorted(rng.choice(len(ids), size=min(n, len(ids)), replace=False))]
        else:
            ids = self.ids
            chosen = [ids[i] for i in sorted(rng.choice(len(ids), size=min(2 * n, len(ids)), replace=False))]
        order = {mid: i for i, mid in enumerate(self.ids)}
        return self.select(sorted(chosen, key=order.__getitem__))
