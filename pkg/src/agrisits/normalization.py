"""Per-band quantile normalization of interpolated patches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS_RANGE = 1e-9


@dataclass
class QuantileNormalizer:
    """Per-band 5%/95% quantiles; bands map through (x - q_low) / (q_high - q_low)."""

    q_low: np.ndarray
    q_high: np.ndarray

    def __post_init__(self):
        self.q_low = np.asarray(self.q_low, dtype=np.float64)
        self.q_high = np.asarray(self.q_high, dtype=np.float64)
        if self.q_low.shape != self.q_high.shape:
            raise ValueError(f"quantile shapes differ: {self.q_low.shape} vs {self.q_high.shape}")
        if np.any(self.q_low > self.q_high):
            raise ValueError("q_low must not exceed q_high")

    @property
    def n_bands(self) -> int:
        return self.q_low.shape[0]

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {"q_low": self.q_low.tolist(), "q_high": self.q_high.tolist()},
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "QuantileNormalizer":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(q_low=np.asarray(obj["q_low"]), q_high=np.asarray(obj["q_high"]))


def fit_quantile_normalizer(patch_data, n_sample: int = 1000, seed: int = 0) -> QuantileNormalizer:
    """Pool up to ``n_sample`` randomly chosen cubes and take per-band 5%/95% quantiles.

    ``patch_data`` is a sequence of [T, B, H, W] arrays (or SitsPatch). The
    quantile convention is linear interpolation between order statistics.
    """
    cubes = [getattr(p, "data", p) for p in patch_data]
    if not cubes:
        raise ValueError("cannot fit a normalizer on an empty patch sample")
    if len(cubes) > n_sample:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(cubes), size=n_sample, replace=False)
        cubes = [cubes[i] for i in sorted(idx)]
    b = cubes[0].shape[1]
    pooled = np.concatenate(
        [np.asarray(c, dtype=np.float64).transpose(1, 0, 2, 3).reshape(b, -1) for c in cubes], axis=1
    )
    q = np.quantile(pooled, [0.05, 0.95], axis=1, method="linear")
    return QuantileNormalizer(q_low=q[0], q_high=q[1])


def apply_normalizer(data: np.ndarray, norm: QuantileNormalizer) -> np.ndarray:
    """Affine per-band rescale, no clipping; degenerate bands map to 0."""
    if data.ndim != 4 or data.shape[1] != norm.n_bands:
        raise ValueError(f"cube has {data.shape[1] if data.ndim == 4 else '?'} bands, normalizer {norm.n_bands}")
    ok = (norm.q_high - norm.q_low) >= EPS_RANGE
    lo = norm.q_low.astype(data.dtype)
    span = (norm.q_high.astype(data.dtype) - lo)
    span[~ok] = 1.0
    out = (data - lo[None, :, None, None]) / span[None, :, None, None]
    out[:, ~ok] = 0.0
    return out
