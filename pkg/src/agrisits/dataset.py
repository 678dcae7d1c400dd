"""Patch/tile bookkeeping and bit-exact file storage.

On-disk formats
---------------
Patch store: one directory per patch holding ``manifest.json`` plus raw
little-endian binary planes:

    manifest.json   dtype, layout "TBHW", shape, dates, bands, origin, endianness
    data.bin        float32, row-major [T, B, H, W]
    crop.bin        uint16 [H, W], 0 = Background
    mgmt.bin        uint8  [H, W], 0 = Background, 1 = Conventional, 2 = Organic
    field.bin       uint32 [H, W], 0 = no field

Scene store (pre-interpolation): ``scene.json`` plus ``obs.bin`` (float32
[N, B, H, W]), ``valid.bin`` (uint8 [N, H, W]) and the three label planes.

Split file: JSON object mapping tile id to "train" | "validation" | "test".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

ROLES = ("train", "validation", "test")

SENTINEL2_BANDS = ["B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12"]

CROP_DTYPE = np.dtype("<u2")
MGMT_DTYPE = np.dtype("u1")
FIELD_DTYPE = np.dtype("<u4")
DATA_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when a stored artifact does not match its manifest."""


def default_time_axis(n_steps: int = 36, spacing_days: int = 10, start: str = "2020-01-01") -> list[str]:
    d0 = date.fromisoformat(start)
    return [(d0 + timedelta(days=spacing_days * k)).isoformat() for k in range(n_steps)]


@dataclass
class SitsPatch:
    """Equidistant time-series cube [T, B, H, W] with its metadata."""

    data: np.ndarray
    origin: tuple[str, int, int] = ("", 0, 0)
    pixel_size: float = 10.0
    time_axis: list[str] = field(default_factory=default_time_axis)
    bands: list[str] = field(default_factory=lambda: list(SENTINEL2_BANDS))

    def __post_init__(self):
        if self.data.ndim != 4:
            raise FormatError(f"patch data must be [T,B,H,W], got shape {self.data.shape}")
        t, b, h, w = self.data.shape
        if t != len(self.time_axis):
            raise FormatError(f"time axis length {len(self.time_axis)} != T={t}")
        if b != len(self.bands):
            raise FormatError(f"band list length {len(self.bands)} != B={b}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelRaster:
    """Per-pixel crop id, management id and field id planes.

    Background (id 0) is consistent across planes, and crop/management are
    constant within a field.
    """

    crop: np.ndarray
    mgmt: np.ndarray
    field_id: np.ndarray

    def __post_init__(self):
        self.crop = np.asarray(self.crop, dtype=CROP_DTYPE)
        self.mgmt = np.asarray(self.mgmt, dtype=MGMT_DTYPE)
        self.field_id = np.asarray(self.field_id, dtype=FIELD_DTYPE)
        if not (self.crop.shape == self.mgmt.shape == self.field_id.shape):
            raise FormatError(
                f"label planes disagree: crop {self.crop.shape}, mgmt {self.mgmt.shape}, field {self.field_id.shape}"
            )
        bg = self.crop == 0
        if not (np.array_equal(bg, self.mgmt == 0) and np.array_equal(bg, self.field_id == 0)):
            raise FormatError("Background must coincide across crop/mgmt/field planes")

    @property
    def shape(self):
        return self.crop.shape


@dataclass
class SceneStack:
    """Irregular observation stack for one tile: shared times, per-pixel validity."""

    tile_id: str
    times: np.ndarray  # [N] days since origin_date, strictly increasing
    values: np.ndarray  # [N, B, H, W] float32
    valid: np.ndarray  # [N, H, W] bool
    labels: LabelRaster
    origin_date: str = "2020-01-01"

    def __post_init__(self):
        n = self.times.shape[0]
        if self.values.shape[0] != n or self.valid.shape[0] != n:
            raise FormatError(f"scene arrays disagree on N: {n}, {self.values.shape}, {self.valid.shape}")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("scene times must be strictly increasing")


# -- grid / patch arithmetic --------------------------------------------------


def tile_grid(extent_px: tuple[int, int], tile_px: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping tile rectangles (row, col, h, w) covering the extent.

    Edge remainders are dropped, not padded.
    """
    if tile_px <= 0:
        raise ValueError("tile_px must be positive")
    rows, cols = extent_px
    return [
        (r, c, tile_px, tile_px)
        for r in range(0, rows - tile_px + 1, tile_px)
        for c in range(0, cols - tile_px + 1, tile_px)
    ]


def extract_patches(
    tile: SitsPatch, labels: LabelRaster, patch_px: int
) -> list[tuple[SitsPatch, LabelRaster]]:
    """Cut a tile into non-overlapping patches with full time series attached."""
    h, w = tile.data.shape[2:]
    tile_id, row0, col0 = tile.origin
    out = []
    for r, c, ph, pw in tile_grid((h, w), patch_px):
        patch = SitsPatch(
            data=tile.data[:, :, r : r + ph, c : c + pw],
            origin=(tile_id, row0 + r, col0 + c),
            pixel_size=tile.pixel_size,
            time_axis=list(tile.time_axis),
            bands=list(tile.bands),
        )
        lab = LabelRaster(
            crop=labels.crop[r : r + ph, c : c + pw],
            mgmt=labels.mgmt[r : r + ph, c : c + pw],
            field_id=labels.field_id[r : r + ph, c : c + pw],
        )
        out.append((patch, lab))
    return out


def agri_share_filter(labels: LabelRaster, threshold: float = 0.15) -> bool:
    """True iff the agricultural share strictly exceeds the threshold."""
    return np.count_nonzero(labels.crop) / labels.crop.size > threshold


def subdivide_cube(data: np.ndarray, px: int) -> np.ndarray:
    """[T,B,H,W] -> [N, T, B, px, px] row-major blocks; H, W must be multiples of px."""
    t, b, h, w = data.shape
    if h % px or w % px:
        raise ValueError(f"patch edge {h}x{w} not divisible by {px}")
    x = data.reshape(t, b, h // px, px, w // px, px)
    return x.transpose(2, 4, 0, 1, 3, 5).reshape(-1, t, b, px, px)


def subdivide_plane(plane: np.ndarray, px: int) -> np.ndarray:
    h, w = plane.shape
    if h % px or w % px:
        raise ValueError(f"plane edge {h}x{w} not divisible by {px}")
    return plane.reshape(h // px, px, w // px, px).transpose(0, 2, 1, 3).reshape(-1, px, px)


def stitch_planes(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    n, px, _ = blocks.shape
    if n * px * px != h * w:
        raise ValueError(f"{n} blocks of {px}x{px} do not tile {h}x{w}")
    return blocks.reshape(h // px, w // px, px, px).transpose(0, 2, 1, 3).reshape(h, w)


# -- binary plane helpers ------------------------------------------------------


def _write_plane(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_plane(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * dtype.itemsize
    raw = path.read_bytes()
    if len(raw) != expected:
        raise FormatError(f"{path.name}: expected {expected} bytes for shape {list(shape)}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_manifest(path: Path, required: tuple[str, ...]) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest ({e})") from e
    for key in required:
        if key not in manifest:
            raise FormatError(f"{path.name}: missing field '{key}'")
    return manifest


# -- patch store ---------------------------------------------------------------


def write_patch(path, patch: SitsPatch, labels: LabelRaster) -> None:
    """Store one patch; the write -> read round trip is bit-exact."""
    if patch.data.shape[2:] != labels.shape:
        raise FormatError(f"patch footprint {patch.data.shape[2:]} != labels {labels.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, b, h, w = patch.data.shape
    manifest = {
        "dtype": "float32",
        "layout": "TBHW",
        "shape": [t, b, h, w],
        "dates": list(patch.time_axis),
        "bands": list(patch.bands),
        "origin": [patch.origin[0], int(patch.origin[1]), int(patch.origin[2])],
        "pixel_size": patch.pixel_size,
        "endianness": "little",
    }
    _write_json(path / "manifest.json", manifest)
    _write_plane(path / "data.bin", patch.data, DATA_DTYPE)
    _write_plane(path / "crop.bin", labels.crop, CROP_DTYPE)
    _write_plane(path / "mgmt.bin", labels.mgmt, MGMT_DTYPE)
    _write_plane(path / "field.bin", labels.field_id, FIELD_DTYPE)


def read_patch(path) -> tuple[SitsPatch, LabelRaster]:
    path = Path(path)
    manifest = _load_manifest(
        path / "manifest.json", ("dtype", "layout", "shape", "dates", "bands", "origin", "endianness")
    )
    if manifest["dtype"] != "float32":
        raise FormatError(f"manifest.json: unsupported dtype '{manifest['dtype']}'")
    if manifest["layout"] != "TBHW":
        raise FormatError(f"manifest.json: unsupported layout '{manifest['layout']}'")
    if manifest["endianness"] != "little":
        raise FormatError(f"manifest.json: unsupported endianness '{manifest['endianness']}'")
    shape = tuple(int(v) for v in manifest["shape"])
    if len(shape) != 4:
        raise FormatError(f"manifest.json: shape must have 4 entries, got {manifest['shape']}")
    data = _read_plane(path / "data.bin", DATA_DTYPE, shape)
    hw = shape[2:]
    labels = LabelRaster(
        crop=_read_plane(path / "crop.bin", CROP_DTYPE, hw),
        mgmt=_read_plane(path / "mgmt.bin", MGMT_DTYPE, hw),
        field_id=_read_plane(path / "field.bin", FIELD_DTYPE, hw),
    )
    origin = manifest["origin"]
    patch = SitsPatch(
        data=data,
        origin=(str(origin[0]), int(origin[1]), int(origin[2])),
        pixel_size=float(manifest.get("pixel_size", 10.0)),
        time_axis=list(manifest["dates"]),
        bands=list(manifest["bands"]),
    )
    return patch, labels


def write_predictions(path, crop_pred: np.ndarray | None = None, mgmt_pred: np.ndarray | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if crop_pred is not None:
        _write_plane(path / "crop_pred.bin", crop_pred, CROP_DTYPE)
    if mgmt_pred is not None:
        _write_plane(path / "mgmt_pred.bin", mgmt_pred, MGMT_DTYPE)


def read_prediction(path, task: str, shape: tuple[int, int]) -> np.ndarray:
    path = Path(path)
    if task == "crop":
        return _read_plane(path / "crop_pred.bin", CROP_DTYPE, shape)
    if task == "mgmt":
        return _read_plane(path / "mgmt_pred.bin", MGMT_DTYPE, shape)
    raise ValueError(f"unknown task '{task}'")


# -- scene store -----------------------------------------------------------------


def write_scene(path, scene: SceneStack) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, b, h, w = scene.values.shape
    _write_json(
        path / "scene.json",
        {
            "tile_id": scene.tile_id,
            "times": [float(t) for t in scene.times],
            "shape": [n, b, h, w],
            "dtype": "float32",
            "endianness": "little",
            "origin_date": scene.origin_date,
        },
    )
    _write_plane(path / "obs.bin", scene.values, DATA_DTYPE)
    _write_plane(path / "valid.bin", scene.valid.astype(np.uint8), MGMT_DTYPE)
    _write_plane(path / "crop.bin", scene.labels.crop, CROP_DTYPE)
    _write_plane(path / "mgmt.bin", scene.labels.mgmt, MGMT_DTYPE)
    _write_plane(path / "field.bin", scene.labels.field_id, FIELD_DTYPE)


def read_scene(path) -> SceneStack:
    path = Path(path)
    manifest = _load_manifest(path / "scene.json", ("tile_id", "times", "shape", "dtype", "endianness"))
    shape = tuple(int(v) for v in manifest["shape"])
    n, b, h, w = shape
    values = _read_plane(path / "obs.bin", DATA_DTYPE, shape)
    valid = _read_plane(path / "valid.bin", MGMT_DTYPE, (n, h, w)).astype(bool)
    labels = LabelRaster(
        crop=_read_plane(path / "crop.bin", CROP_DTYPE, (h, w)),
        mgmt=_read_plane(path / "mgmt.bin", MGMT_DTYPE, (h, w)),
        field_id=_read_plane(path / "field.bin", FIELD_DTYPE, (h, w)),
    )
    return SceneStack(
        tile_id=manifest["tile_id"],
        times=np.asarray(manifest["times"], dtype=np.float64),
        values=values,
        valid=valid,
        labels=labels,
        origin_date=manifest.get("origin_date", "2020-01-01"),
    )


# -- split assignment --------------------------------------------------------------


def save_split(path, assignment: dict[str, str]) -> None:
    for tile, role in assignment.items():
        if role not in ROLES:
            raise ValueError(f"tile {tile}: unknown role '{role}'")
    _write_json(Path(path), assignment)


def load_split(path) -> dict[str, str]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    for tile, role in obj.items():
        if role not in ROLES:
            raise FormatError(f"split file: tile {tile} has unknown role '{role}'")
    return obj


# -- patch directory index -----------------------------------------------------------


def write_patch_index(root, entries: dict[str, dict]) -> None:
    _write_json(Path(root) / "index.json", entries)


def load_patch_index(root) -> dict[str, dict]:
    return json.loads((Path(root) / "index.json").read_text(encoding="utf-8"))


def list_patch_dirs(root, role: str | None = None) -> list[Path]:
    root = Path(root)
    index = load_patch_index(root)
    names = sorted(k for k, v in index.items() if role is None or v["role"] == role)
    return [root / n for n in names]
