"""Synthetic scene generator for desk-scale verification of the whole pipeline.

Tiles are filled with rectangular fields (constant crop and management per
field, one-pixel background borders). Every pixel carries a double-logistic
phenology curve mixed into ten spectral bands, sampled at irregular
acquisition dates with cloud gaps. Organic fields scale the curve amplitude
by ``amplitude_factor`` and modulate it with a spatially correlated noise
field of standard deviation ``heterogeneity_sd``, mirroring the greater
within-field variability of extensively managed parcels. Everything is
deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabelRaster, SceneStack


class ConfigError(ValueError):
    pass


# Dormant-soil reflectance and green-up response per band (B02..B12): visible
# bands dip slightly with canopy growth, red edge and NIR rise, SWIR drops.
SOIL = np.array([0.06, 0.08, 0.10, 0.12, 0.14, 0.15, 0.16, 0.17, 0.22, 0.18])
GREEN = np.array([-0.02, 0.01, -0.05, 0.04, 0.12, 0.22, 0.30, 0.32, -0.08, -0.10])

BACKGROUND_GREENNESS = 0.12


def double_logistic(t: np.ndarray, sos: float, eos: float, rate_up: float, rate_down: float) -> np.ndarray:
    """Canonical two-sided growth curve in [0, 1): rises at sos, falls at eos."""
    t = np.asarray(t, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-rate_up * (t - sos))) + 1.0 / (1.0 + np.exp(rate_down * (t - eos))) - 1.0


@dataclass
class CropPhenology:
    sos: float
    eos: float
    rate_up: float = 0.09
    rate_down: float = 0.07
    amplitude: float = 1.0


def default_crops(n_crops: int) -> list[CropPhenology]:
    step = 130.0 / max(n_crops - 1, 1)
    return [
        CropPhenology(
            sos=60.0 + i * step,
            eos=185.0 + i * step * 0.85,
            amplitude=1.0 + 0.12 * ((i % 3) - 1),
        )
        for i in range(n_crops)
    ]


@dataclass
class MgmtEffect:
    amplitude_factor: float = 0.85
    heterogeneity_sd: float = 0.05


@dataclass
class SynthConfig:
    seed: int = 0
    n_tiles: int = 4
    tile_px: int = 60
    n_crops: int = 3
    organic_fraction: float = 0.5
    field_px_min: int = 9
    field_px_max: int = 16
    field_density: float = 0.9
    crops: list[CropPhenology] | None = None
    noise_sd: float = 0.012
    mgmt_effect: MgmtEffect = field(default_factory=MgmtEffect)
    cloud_gap_rate: float = 0.3
    het_cell_px: int = 5
    obs_start: float = -60.0
    obs_end: float = 420.0
    obs_spacing: float = 5.0
    obs_jitter: float = 2.0

    def __post_init__(self):
        if self.n_crops < 2:
            raise ConfigError(f"need at least 2 crop types, got {self.n_crops}")
        if not (0.0 <= self.cloud_gap_rate < 1.0):
            raise ConfigError(f"cloud_gap_rate must be in [0, 1), got {self.cloud_gap_rate}")
        if not (0.0 <= self.organic_fraction <= 1.0):
            raise ConfigError(f"organic_fraction must be in [0, 1], got {self.organic_fraction}")
        if self.obs_jitter >= self.obs_spacing / 2:
            raise ConfigError("obs_jitter must be below half the acquisition spacing")
        if self.crops is not None and len(self.crops) != self.n_crops:
            raise ConfigError(f"{len(self.crops)} phenologies given for {self.n_crops} crops")

    def crop_params(self) -> list[CropPhenology]:
        return self.crops if self.crops is not None else default_crops(self.n_crops)


def _strip_edges(rng: np.random.Generator, extent: int, lo: int, hi: int) -> list[int]:
    edges = [0]
    while edges[-1] < extent:
        edges.append(edges[-1] + int(rng.integers(lo, hi + 1)))
    edges[-1] = extent
    return edges


def _bilinear_field(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Smooth unit-variance noise: coarse Gaussian grid, bilinearly upsampled."""
    gh = h // cell + 2
    gw = w // cell + 2
    grid = rng.normal(size=(gh, gw))
    yy = np.arange(h) / cell
    xx = np.arange(w) / cell
    i0 = np.floor(yy).astype(int)
    j0 = np.floor(xx).astype(int)
    fy = (yy - i0)[:, None]
    fx = (xx - j0)[None, :]
    g00 = grid[np.ix_(i0, j0)]
    g01 = grid[np.ix_(i0, j0 + 1)]
    g10 = grid[np.ix_(i0 + 1, j0)]
    g11 = grid[np.ix_(i0 + 1, j0 + 1)]
    return g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx


def _generate_tile(cfg: SynthConfig, tile_idx: int) -> SceneStack:
    rng = np.random.default_rng([cfg.seed, tile_idx])
    px = cfg.tile_px

    # irregular acquisition calendar
    base = np.arange(cfg.obs_start, cfg.obs_end, cfg.obs_spacing)
    times = base + rng.uniform(-cfg.obs_jitter, cfg.obs_jitter, size=base.shape)
    n_obs = times.shape[0]

    # rectangular field layout with one-pixel background borders
    crop = np.zeros((px, px), dtype=np.uint16)
    mgmt = np.zeros((px, px), dtype=np.uint8)
    fid = np.zeros((px, px), dtype=np.uint32)
    next_id = 1
    rows = _strip_edges(rng, px, cfg.field_px_min, cfg.field_px_max)
    cols = _strip_edges(rng, px, cfg.field_px_min, cfg.field_px_max)
    for r0, r1 in zip(rows[:-1], rows[1:]):
        for c0, c1 in zip(cols[:-1], cols[1:]):
            is_field = rng.random() < cfg.field_density
            crop_id = int(rng.integers(1, cfg.n_crops + 1))
            organic = rng.random() < cfg.organic_fraction
            if not is_field or (r1 - r0) < 3 or (c1 - c0) < 3:
                continue
            crop[r0 + 1 : r1, c0 + 1 : c1] = crop_id
            mgmt[r0 + 1 : r1, c0 + 1 : c1] = 2 if organic else 1
            fid[r0 + 1 : r1, c0 + 1 : c1] = next_id
            next_id += 1

    # per-pixel amplitude: crop base, organic scaling, correlated heterogeneity
    params = cfg.crop_params()
    het = _bilinear_field(rng, px, px, cfg.het_cell_px)
    amp = np.zeros((px, px))
    for i, p in enumerate(params):
        amp[crop == i + 1] = p.amplitude
    organic_mask = mgmt == 2
    amp[organic_mask] *= cfg.mgmt_effect.amplitude_factor
    amp[organic_mask] *= 1.0 + cfg.mgmt_effect.heterogeneity_sd * het[organic_mask]

    # curve lookup: row 0 is the background's flat greenness, rows 1.. the crops
    curves = np.empty((cfg.n_crops + 1, n_obs))
    curves[0] = BACKGROUND_GREENNESS
    for i, p in enumerate(params):
        curves[i + 1] = double_logistic(times, p.sos, p.eos, p.rate_up, p.rate_down)
    greenness = curves[crop.astype(int)]  # [H, W, N]
    scale = np.where(crop == 0, 1.0, amp)
    signal = (scale[:, :, None] * greenness).transpose(2, 0, 1)  # [N, H, W]
    values = SOIL[None, :, None, None] + GREEN[None, :, None, None] * signal[:, None, :, :]

    valid = rng.random((n_obs, px, px)) >= cfg.cloud_gap_rate
    noise = rng.normal(0.0, cfg.noise_sd, size=values.shape)
    values = (values + noise).astype(np.float32)

    labels = LabelRaster(crop=crop, mgmt=mgmt, field_id=fid)
    return SceneStack(
        tile_id=f"tile_{tile_idx:03d}",
        times=times,
        values=values,
        valid=valid,
        labels=labels,
    )


def generate(cfg: SynthConfig) -> list[SceneStack]:
    """Generate ``cfg.n_tiles`` synthetic tiles, deterministic given ``cfg.seed``."""
    return [_generate_tile(cfg, i) for i in range(cfg.n_tiles)]


def default_split(n_tiles: int, n_val: int, n_test: int) -> dict[str, str]:
    """Last ``n_val`` + ``n_test`` tiles become validation/test, the rest train."""
    if n_val + n_test >= n_tiles:
        raise ConfigError(f"{n_val} validation + {n_test} test tiles leave no training tiles of {n_tiles}")
    roles = {}
    for i in range(n_tiles):
        if i < n_tiles - n_val - n_test:
            roles[f"tile_{i:03d}"] = "train"
        elif i < n_tiles - n_test:
            roles[f"tile_{i:03d}"] = "validation"
        else:
            roles[f"tile_{i:03d}"] = "test"
    return roles
