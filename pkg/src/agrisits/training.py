"""Loss aggregation, AdamW with a warmup/cosine schedule, and the epoch loop.

The learning rate rises linearly from ``lr_start`` to ``lr_peak`` across the
warmup epochs, follows a cosine from ``lr_peak`` down to ``lr_floor`` until
``cosine_end_epoch`` and stays at the floor afterwards; it is updated every
optimizer step on the continuous epoch fraction. After each epoch the
validation macro-F1 is computed per task (per-pixel, pooled over patches)
and the best checkpoint per task is retained, earliest epoch winning ties.

The per-epoch log is an append-only CSV with the header
``epoch,lr,loss_total,loss_crop,loss_mgmt,f1_crop,f1_mgmt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from . import tsvit
from .dataset import subdivide_cube, subdivide_plane
from .metrics import confusion, summary
from .tensor import Tensor

LOG_HEADER = "epoch,lr,loss_total,loss_crop,loss_mgmt,f1_crop,f1_mgmt"


@dataclass
class TrainConfig:
    batch_patches: int = 20
    epochs: int = 40
    warmup_epochs: float = 2.0
    lr_start: float = 5e-5
    lr_peak: float = 1e-4
    lr_floor: float = 1e-5
    cosine_end_epoch: float = 20.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    task_weights: dict[str, float] | None = None
    input_px: int | None = None  # subdivide stored patches to this edge; None = as stored
    subpatches_per_patch: int | None = None  # cap when subdividing; None = all

    def __post_init__(self):
        if self.lr_start > self.lr_peak or self.lr_floor > self.lr_peak:
            raise ValueError("learning rates must satisfy lr_start <= lr_peak and lr_floor <= lr_peak")
        if not (0 <= self.warmup_epochs < self.cosine_end_epoch <= self.epochs):
            raise ValueError("need 0 <= warmup_epochs < cosine_end_epoch <= epochs")
        if self.batch_patches < 1:
            raise ValueError("batch_patches must be positive")


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Piecewise schedule: linear warmup, cosine decay, constant floor."""
    e = float(epoch_fraction)
    if e < 0:
        raise ValueError("epoch_fraction must be non-negative")
    if e == cfg.warmup_epochs:
        return cfg.lr_peak
    if e < cfg.warmup_epochs:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * e / cfg.warmup_epochs
    if e <= cfg.cosine_end_epoch:
        span = cfg.cosine_end_epoch - cfg.warmup_epochs
        phase = (e - cfg.warmup_epochs) / span
        return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * (1.0 + math.cos(math.pi * phase)) / 2.0
    return cfg.lr_floor


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam moments plus decoupled weight decay p -= lr*wd*p."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise FloatingPointError(f"NaN gradient in parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)


def global_loss(logits: dict[str, Tensor], labels: dict[str, np.ndarray],
                task_weights: dict[str, float] | None = None) -> Tensor:
    """Weighted sum of per-task cross-entropies over all pixels (weights default to 1)."""
    loss = None
    for name, t in logits.items():
        w = 1.0 if task_weights is None else float(task_weights.get(name, 1.0))
        k = t.shape[-1]
        flat = t.reshape(-1, k)
        term = tt.cross_entropy(flat, np.asarray(labels[name]).ravel())
        if w != 1.0:
            term = term * w
        loss = term if loss is None else loss + term
    return loss


def select_best(values: list[float]) -> int:
    """1-based epoch whose metric is maximal; ties resolve to the earliest epoch."""
    if not values:
        raise ValueError("no epochs recorded")
    best = max(values)
    return values.index(best) + 1


@dataclass
class BestCheckpoint:
    epoch: int
    f1: float
    params: dict[str, Tensor]


@dataclass
class TrainResult:
    log: list[dict]
    best: dict[str, BestCheckpoint]


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(t.data.copy(), requires_grad=True, dtype=t.data.dtype) for k, t in params.items()}


def _as_inputs(cube: np.ndarray, labels: dict[str, np.ndarray], input_px: int | None):
    """One stored patch -> list of model inputs (possibly subdivided)."""
    if input_px is None or input_px == cube.shape[-1]:
        return [cube], [labels]
    cubes = subdivide_cube(cube, input_px)
    planes = {k: subdivide_plane(v, input_px) for k, v in labels.items()}
    return list(cubes), [{k: v[i] for k, v in planes.items()} for i in range(cubes.shape[0])]


def _format_row(row: dict) -> str:
    def num(key, fmt="{:.8g}"):
        return fmt.format(row[key]) if row.get(key) is not None else ""

    return ",".join(
        [str(row["epoch"]), num("lr"), num("loss_total"), num("loss_crop"),
         num("loss_mgmt"), num("f1_crop"), num("f1_mgmt")]
    )


def append_log_row(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(LOG_HEADER + "\n")
        fh.write(_format_row(row) + "\n")


def evaluate_macro_f1(params, model_cfg: tsvit.TsvitConfig, patch_set, input_px=None,
                      batch_inputs: int = 256) -> dict[str, float]:
    """Per-task macro-F1 over every pixel of a patch set (wall to wall)."""
    cms = {}
    inputs, label_list = [], []
    for cube, labels in patch_set:
        cs, ls = _as_inputs(cube, labels, input_px)
        inputs.extend(cs)
        label_list.extend(ls)
    for start in range(0, len(inputs), batch_inputs):
        chunk = np.stack(inputs[start : start + batch_inputs])
        with tt.no_grad():
            preds = tsvit.predict(tsvit.forward(chunk, params, model_cfg))
        for name, k in model_cfg.tasks:
            ref = np.stack([l[name] for l in label_list[start : start + batch_inputs]])
            cm = confusion(preds[name], ref, k)
            cms[name] = cm if name not in cms else cms[name] + cm
    return {name: summary(cm)[0] for name, cm in cms.items()}


def train(params: dict[str, Tensor], model_cfg: tsvit.TsvitConfig, train_set, val_set,
          cfg: TrainConfig, log_path=None) -> TrainResult:
    """Seeded epoch loop over ``train_set`` with per-epoch validation selection.

    ``train_set``/``val_set`` are sequences of ``(cube [T,B,H,W], labels)``
    pairs where ``labels`` maps task name to an integer plane. Returns the
    per-epoch log and the best checkpoint per task.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    log: list[dict] = []
    f1_history: dict[str, list[float]] = {name: [] for name, _ in model_cfg.tasks}
    best: dict[str, BestCheckpoint] = {}
    task_names = [name for name, _ in model_cfg.tasks]

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        n_batches = max(1, math.ceil(len(order) / cfg.batch_patches))
        epoch_losses = []
        task_losses = {name: [] for name in task_names}
        lr = lr_at(epoch - 1, cfg)
        for b in range(n_batches):
            sel = order[b * cfg.batch_patches : (b + 1) * cfg.batch_patches]
            inputs, label_list = [], []
            for i in sel:
                cube, labels = train_set[i]
                cs, ls = _as_inputs(cube, labels, cfg.input_px)
                if cfg.subpatches_per_patch is not None and len(cs) > cfg.subpatches_per_patch:
                    pick = rng.choice(len(cs), size=cfg.subpatches_per_patch, replace=False)
                    cs = [cs[j] for j in pick]
                    ls = [ls[j] for j in pick]
                inputs.extend(cs)
                label_list.extend(ls)
            batch = np.stack(inputs).astype(tt.default_dtype())
            logits = tsvit.forward(batch, params, model_cfg)
            stacked = {name: np.stack([l[name] for l in label_list]) for name in task_names}
            per_task = {
                name: tt.cross_entropy(logits[name].reshape(-1, logits[name].shape[-1]),
                                       stacked[name].ravel())
                for name in task_names
            }
            weights = cfg.task_weights or {}
            loss = None
            for name in task_names:
                term = per_task[name]
                w = float(weights.get(name, 1.0))
                if w != 1.0:
                    term = term * w
                loss = term if loss is None else loss + term
            for p in params.values():
                p.zero_grad()
            loss.backward()
            lr = lr_at((epoch - 1) + (b + 1) / n_batches, cfg)
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                     for name, p in params.items()}
            adamw_step(params, grads, state, lr, cfg)
            epoch_losses.append(float(loss.data))
            for name in task_names:
                task_losses[name].append(float(per_task[name].data))

        f1 = evaluate_macro_f1(params, model_cfg, val_set, input_px=cfg.input_px)
        for name in task_names:
            f1_history[name].append(f1[name])
            if name not in best or f1[name] > best[name].f1:
                best[name] = BestCheckpoint(epoch=epoch, f1=f1[name], params=_snapshot(params))
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": float(np.mean(epoch_losses)),
            "loss_crop": float(np.mean(task_losses["crop"])) if "crop" in task_losses else None,
            "loss_mgmt": float(np.mean(task_losses["mgmt"])) if "mgmt" in task_losses else None,
            "f1_crop": f1.get("crop"),
            "f1_mgmt": f1.get("mgmt"),
        }
        log.append(row)
        if log_path is not None:
            append_log_row(log_path, row)

    for name in task_names:
        assert best[name].epoch == select_best(f1_history[name])
    return TrainResult(log=log, best=best)
