"""Temporo-spatial transformer over sub-patch token sequences.

An input cube [T, B, H, W] is cut into S x S sub-patches, each contributing a
T-step token sequence. Learnable class tokens (one per output class, grouped
by task) are prepended, and a temporal encoder lets them attend over time
within each sub-patch. Only the class tokens survive into the spatial
encoder, where the tokens of one class attend to each other across
sub-patches; classes never mix (shared weights, class-isolated attention).
A per-task linear head decodes each (sub-patch, class) token into S^2 pixel
scores, assembling one score map per class. When a patch is a single
sub-patch the spatial stage does not exist.

Parameters live in a flat name -> Tensor dict so optimizers and checkpoints
can address every array individually.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .dataset import FormatError
from .tensor import Tensor, ShapeError

TaskSpec = tuple[str, int]


@dataclass
class TsvitConfig:
    tasks: list[TaskSpec] = field(default_factory=lambda: [("crop", 24), ("mgmt", 3)])
    patch_px: int = 30
    subpatch_px: int = 2
    embed_dim: int = 150
    temporal_depth: int = 8
    spatial_depth: int = 4
    heads: int = 8
    head_dim: int = 16
    mlp_ratio: int = 4
    n_steps: int = 36
    n_bands: int = 10

    def __post_init__(self):
        self.tasks = [(str(n), int(k)) for n, k in self.tasks]
        if not self.tasks:
            raise ValueError("at least one task is required")
        names = [n for n, _ in self.tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names: {names}")
        if any(k < 2 for _, k in self.tasks):
            raise ValueError("every task needs at least 2 classes")
        if self.patch_px % self.subpatch_px:
            raise ShapeError(f"sub-patch size {self.subpatch_px} does not divide patch size {self.patch_px}")
        for f_name in ("embed_dim", "temporal_depth", "spatial_depth", "heads", "head_dim", "mlp_ratio"):
            if getattr(self, f_name) < 0 or (f_name in ("embed_dim", "heads", "head_dim") and getattr(self, f_name) == 0):
                raise ValueError(f"{f_name} must be positive")

    @property
    def n_class_tokens(self) -> int:
        return sum(k for _, k in self.tasks)

    @property
    def n_subpatches(self) -> int:
        return (self.patch_px // self.subpatch_px) ** 2

    @property
    def use_spatial(self) -> bool:
        # single-sub-patch inputs (e.g. 2x2 patches) have no spatial stage
        return self.n_subpatches > 1

    def to_dict(self) -> dict:
        return {
            "tasks": [[n, k] for n, k in self.tasks],
            "patch_px": self.patch_px,
            "subpatch_px": self.subpatch_px,
            "embed_dim": self.embed_dim,
            "temporal_depth": self.temporal_depth,
            "spatial_depth": self.spatial_depth,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "mlp_ratio": self.mlp_ratio,
            "n_steps": self.n_steps,
            "n_bands": self.n_bands,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TsvitConfig":
        kw = dict(obj)
        kw["tasks"] = [(n, int(k)) for n, k in kw["tasks"]]
        return cls(**kw)


# -- parameters ----------------------------------------------------------------


def _trunc_normal(rng, shape, sd=0.02):
    x = rng.normal(0.0, sd, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * sd
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, sd, size=int(bad.sum()))


def _fan_in_uniform(rng, fan_in, fan_out):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _block_param_specs(prefix: str, cfg: TsvitConfig):
    d = cfg.embed_dim
    hh = cfg.heads * cfg.head_dim
    rd = cfg.mlp_ratio * d
    return [
        (f"{prefix}.ln1.gamma", "ones", (d,)),
        (f"{prefix}.ln1.beta", "zeros", (d,)),
        (f"{prefix}.attn.wq", "linear", (d, hh)),
        (f"{prefix}.attn.bq", "zeros", (hh,)),
        (f"{prefix}.attn.wk", "linear", (d, hh)),
        (f"{prefix}.attn.bk", "zeros", (hh,)),
        (f"{prefix}.attn.wv", "linear", (d, hh)),
        (f"{prefix}.attn.bv", "zeros", (hh,)),
        (f"{prefix}.attn.wo", "linear", (hh, d)),
        (f"{prefix}.attn.bo", "zeros", (d,)),
        (f"{prefix}.ln2.gamma", "ones", (d,)),
        (f"{prefix}.ln2.beta", "zeros", (d,)),
        (f"{prefix}.mlp.w1", "linear", (d, rd)),
        (f"{prefix}.mlp.b1", "zeros", (rd,)),
        (f"{prefix}.mlp.w2", "linear", (rd, d)),
        (f"{prefix}.mlp.b2", "zeros", (d,)),
    ]


def _param_specs(cfg: TsvitConfig):
    d = cfg.embed_dim
    s2 = cfg.subpatch_px**2
    specs = [
        ("embed.weight", "linear", (cfg.n_bands * s2, d)),
        ("embed.bias", "zeros", (d,)),
        ("temporal_pos", "embedding", (cfg.n_steps, d)),
    ]
    for name, k in cfg.tasks:
        specs.append((f"class_tokens.{name}", "embedding", (k, d)))
    for i in range(cfg.temporal_depth):
        specs.extend(_block_param_specs(f"temporal.{i}", cfg))
    if cfg.use_spatial:
        specs.append(("spatial_pos", "embedding", (cfg.n_subpatches, d)))
        for i in range(cfg.spatial_depth):
            specs.extend(_block_param_specs(f"spatial.{i}", cfg))
    for name, _ in cfg.tasks:
        specs.append((f"head.{name}.weight", "linear", (d, s2)))
        specs.append((f"head.{name}.bias", "zeros", (s2,)))
    return specs


def init_params(cfg: TsvitConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded initialization: truncated normal for embeddings and class tokens,
    fan-in scaled uniform for linear weights, zeros for biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, kind, shape in _param_specs(cfg):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "embedding":
            arr = _trunc_normal(rng, shape)
        else:
            arr = _fan_in_uniform(rng, *shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def param_count(cfg: TsvitConfig) -> int:
    """Closed-form learnable array size as a function of the config."""
    d = cfg.embed_dim
    s2 = cfg.subpatch_px**2
    hh = cfg.heads * cfg.head_dim
    rd = cfg.mlp_ratio * d
    block = 4 * d + 3 * (d * hh + hh) + hh * d + d + d * rd + rd + rd * d + d
    total = (cfg.n_bands * s2 + 1) * d  # acquisition embedding
    total += cfg.n_steps * d  # temporal positions
    total += cfg.n_class_tokens * d
    total += cfg.temporal_depth * block
    if cfg.use_spatial:
        total += cfg.n_subpatches * d + cfg.spatial_depth * block
    total += sum(d * s2 + s2 for _ in cfg.tasks)
    return total


# -- forward pieces ---------------------------------------------------------------

_ATTN_PROBE: list | None = None


@contextmanager
def capture_attention():
    """Collect every attention weight array produced inside the block (debugging)."""
    global _ATTN_PROBE
    old = _ATTN_PROBE
    _ATTN_PROBE = []
    try:
        yield _ATTN_PROBE
    finally:
        _ATTN_PROBE = old


def _attention(x: Tensor, params, prefix: str, cfg: TsvitConfig) -> Tensor:
    n, length, d = x.shape
    h, hd = cfg.heads, cfg.head_dim

    def split_heads(t):
        return t.reshape(n, length, h, hd).transpose(0, 2, 1, 3)

    q = split_heads(tt.linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]))
    k = split_heads(tt.linear(x, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]))
    v = split_heads(tt.linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]))
    scores = tt.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = tt.softmax(scores, axis=-1)
    if _ATTN_PROBE is not None:
        _ATTN_PROBE.append(attn.data)
    out = tt.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, length, h * hd)
    return tt.linear(out, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])


def _mlp(x: Tensor, params, prefix: str) -> Tensor:
    y = tt.gelu(tt.linear(x, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return tt.linear(y, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def _encoder_block(x: Tensor, params, prefix: str, cfg: TsvitConfig) -> Tensor:
    a = tt.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    x = x + _attention(a, params, prefix, cfg)
    m = tt.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    return x + _mlp(m, params, prefix)


def _check_input(data: np.ndarray, cfg: TsvitConfig) -> tuple[np.ndarray, bool]:
    single = data.ndim == 4
    batch = data[None] if single else data
    if batch.ndim != 5:
        raise ShapeError(f"expected [T,B,H,W] or [N,T,B,H,W], got {data.shape}")
    _, t, b, hh, ww = batch.shape
    if hh != ww:
        raise ShapeError(f"patches must be square, got {hh}x{ww}")
    if hh != cfg.patch_px:
        raise ShapeError(f"patch edge {hh} != configured {cfg.patch_px}")
    if hh % cfg.subpatch_px:
        raise ShapeError(f"sub-patch size {cfg.subpatch_px} does not divide patch edge {hh}")
    if t != cfg.n_steps or b != cfg.n_bands:
        raise ShapeError(f"cube is [T={t}, B={b}], config wants [T={cfg.n_steps}, B={cfg.n_bands}]")
    return batch, single


def tokenize(data: np.ndarray, params, cfg: TsvitConfig) -> Tensor:
    """Embed sub-patch acquisitions: [N?, T, B, H, W] -> tokens [N, P, T, d].

    Each acquisition of a sub-patch flattens its B*S*S values (band-major),
    passes the shared linear embedding, and receives its time-step position.
    """
    batch, _ = _check_input(np.asarray(data), cfg)
    n, t, b, hh, _ = batch.shape
    s = cfg.subpatch_px
    hs = hh // s
    x = batch.reshape(n, t, b, hs, s, hs, s).transpose(0, 3, 5, 1, 2, 4, 6)
    x = np.ascontiguousarray(x).reshape(n, hs * hs, t, b * s * s)
    tokens = tt.linear(Tensor(x), params["embed.weight"], params["embed.bias"])
    return tokens + params["temporal_pos"]


def temporal_encode(tokens: Tensor, params, cfg: TsvitConfig) -> Tensor:
    """Attend over (class tokens + time steps) per sub-patch; keep class tokens.

    tokens [N, P, T, d] -> class features [N, P, n, d]. Sub-patches are
    independent: the encoder runs with (N * P) as the batch axis.
    """
    n, p, t, d = tokens.shape
    n_cls = cfg.n_class_tokens
    cls = tt.concat([params[f"class_tokens.{name}"] for name, _ in cfg.tasks], axis=0)
    cls = cls.broadcast_to((n, p, n_cls, d))
    x = tt.concat([cls, tokens], axis=2).reshape(n * p, n_cls + t, d)
    for i in range(cfg.temporal_depth):
        x = _encoder_block(x, params, f"temporal.{i}", cfg)
    return x.reshape(n, p, n_cls + t, d).slice_axis(2, 0, n_cls)


def spatial_encode(class_features: Tensor, params, cfg: TsvitConfig) -> Tensor:
    """Let each class's tokens attend across sub-patches; classes never mix.

    [N, P, n, d] -> [N, P, n, d]. Identity when the patch is a single
    sub-patch (no spatial stage exists). Position embeddings are shared
    across classes and tasks.
    """
    n, p, n_cls, d = class_features.shape
    if p == 1 or not cfg.use_spatial:
        return class_features
    x = class_features.transpose(0, 2, 1, 3)  # [N, n, P, d]
    x = x + params["spatial_pos"]
    x = x.reshape(n * n_cls, p, d)
    for i in range(cfg.spatial_depth):
        x = _encoder_block(x, params, f"spatial.{i}", cfg)
    return x.reshape(n, n_cls, p, d).transpose(0, 2, 1, 3)


def _decode_task(feats: Tensor, params, task: str, k: int, offset: int, cfg: TsvitConfig, hh: int) -> Tensor:
    """Map the (sub-patch, class) tokens of one task to an [N, H, W, k] logit map."""
    n, p, _, d = feats.shape
    s = cfg.subpatch_px
    hs = hh // s
    tok = feats.slice_axis(2, offset, offset + k)
    scores = tt.linear(tok, params[f"head.{task}.weight"], params[f"head.{task}.bias"])  # [N,P,k,S^2]
    scores = scores.reshape(n, hs, hs, k, s, s)
    scores = scores.transpose(0, 1, 4, 2, 5, 3)  # [N, hs, S, hs, S, k]
    return scores.reshape(n, hh, hh, k)


def forward(data: np.ndarray, params, cfg: TsvitConfig) -> dict[str, Tensor]:
    """Full model: normalized cube(s) -> per-task logits [N?, H, W, n_classes]."""
    batch, single = _check_input(np.asarray(data), cfg)
    hh = batch.shape[3]
    tokens = tokenize(batch, params, cfg)
    feats = temporal_encode(tokens, params, cfg)
    feats = spatial_encode(feats, params, cfg)
    out = {}
    offset = 0
    for name, k in cfg.tasks:
        logits = _decode_task(feats, params, name, k, offset, cfg, hh)
        out[name] = logits.reshape(logits.shape[1:]) if single else logits
        offset += k
    return out


def predict(logits: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Per-pixel argmax per task; ties break toward the lowest class id."""
    return {name: np.argmax(t.data, axis=-1) for name, t in logits.items()}


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], cfg: TsvitConfig) -> None:
    """manifest.json (config + named parameter table) plus params.bin (little-endian)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = next(iter(params.values())).data.dtype
    table = []
    offset = 0
    blobs = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=np.dtype(dtype).newbyteorder("<"))
        table.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    manifest = {
        "config": cfg.to_dict(),
        "dtype": np.dtype(dtype).name,
        "endianness": "little",
        "params": table,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, Tensor], TsvitConfig]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint manifest ({e})") from e
    cfg = TsvitConfig.from_dict(manifest["config"])
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    raw = (path / "params.bin").read_bytes()
    params: dict[str, Tensor] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise FormatError(f"params.bin: {entry['name']} needs bytes [{start}, {end}), file has {len(raw)}")
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        params[entry["name"]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    expected = [name for name, _, _ in _param_specs(cfg)]
    if list(params) != expected:
        raise FormatError("checkpoint parameter table does not match its config")
    return params, cfg
