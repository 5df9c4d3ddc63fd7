"""Pre-training, task fine-tuning, data-fraction and incremental-learning workflows.

All workflows take raw (unnormalized) scenes. The model's normalizer is fitted
on the training split when the model does not carry one yet, and every
prediction is denormalized before metrics are computed.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .geo import horizontal_error, vertical_error
from .model import Model, query_matrix
from .scene import Normalizer, Scene, batch

TASKS = ("mask_recovery", "trajectory", "eta")
MODES = ("pretrain", "finetune", "scratch", "incremental")
PERIODS = ("day", "week", "month")
HORIZON = 12  # 2 min at 10 s sampling
OVERFIT_MIN_SCENES = 16  # fewer training scenes per update than this is flagged

_log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    mode: str = "pretrain"
    task: str = "mask_recovery"
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 8
    data_fraction: float = 1.0
    update_period: str | None = None
    seed: int = 0
    mask_steps: int = HORIZON
    fixed_masks: bool = False  # reuse the evaluation masks every epoch (overfit checks)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.mask_steps < 1:
            raise ValueError("epochs, batch_size and mask_steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.update_period is not None and self.update_period not in PERIODS:
            raise ValueError(f"update_period must be one of {PERIODS}")
        if self.mode == "incremental" and self.update_period is None:
            raise ValueError("incremental mode needs an update_period")

    @classmethod
    def default(cls, mode: str, task: str = "mask_recovery", **overrides) -> "ExperimentPlan":
        """Plan with the reference learning rates and epoch counts for ``mode``/``task``."""
        if mode == "pretrain":
            base = dict(epochs=100, lr=1e-4)
        elif mode == "scratch":
            base = dict(epochs=100, lr=1e-4)
        else:
            base = dict(epochs=10, lr=5e-5 if task == "eta" else 2e-5)
        base.update(overrides)
        return cls(mode=mode, task=task, **base)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    HE_nm: float | None = None
    VE_ft: float | None = None
    MAE_s: float | None = None
    RMSE_s: float | None = None
    loss: float | None = None
    wall_time_s: float = 0.0

    def metrics(self) -> dict[str, float]:
        keys = ("MAE_s", "RMSE_s") if self.task == "eta" else ("HE_nm", "VE_ft")
        keys = tuple(k for k in keys if getattr(self, k) is not None)
        out = {k: getattr(self, k) for k in keys}
        if self.loss is not None:
            out["loss"] = self.loss
        return out

    def to_dict(self, timing: bool = False) -> dict:
        d = {"task": self.task, "n_samples": self.n_samples, **self.metrics()}
        if timing:
            d["wall_time_s"] = self.wall_time_s
        return d


class RunLog:
    """Append-only ``key=value`` line log; also kept in memory for checks."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.write_text("")

    def log(self, event: str, **fields) -> None:
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(format_record(rec) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        """Records of a log file, values as strings."""
        return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


# --------------------------------------------------------------------------
# data handling


def split_scenes(scenes: Sequence[Scene], ratios=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Chronological split into train / validation / test blocks of whole windows."""
    ordered = sorted(scenes, key=lambda s: s.window_start)
    n = len(ordered)
    n_val = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]


def subsample(scenes: Sequence[Scene], fraction: float, seed: int) -> list[Scene]:
    """Seeded random subset preserving the original order; fraction 1 returns all."""
    if fraction >= 1.0:
        return list(scenes)
    k = int(round(fraction * len(scenes)))
    if k == 0:
        raise ValueError(f"data fraction {fraction} leaves no training scenes")
    rng = np.random.default_rng([seed, 104729])
    idx = np.sort(rng.choice(len(scenes), size=k, replace=False))
    return [scenes[i] for i in idx]


def eligible(scene: Scene, task: str, horizon: int = HORIZON) -> bool:
    if task == "trajectory":
        return bool(np.any(scene.valid_len >= horizon + 1))
    if task == "eta":
        return bool(np.any(scene.airborne()))
    return True


def scene_rng(seed: int, scene: Scene) -> np.random.Generator:
    return np.random.default_rng([seed, int(round(scene.window_start)) & 0xFFFFFFFF, 7])


def pretrain_mask(scene: Scene, rng: np.random.Generator, span: int = HORIZON) -> np.ndarray:
    """One contiguous masked span of one agent, (N, T) bool.

    When no agent is long enough the span shrinks to the longest valid length.
    """
    span = max(1, min(span, int(scene.valid_len.max())))
    candidates = np.flatnonzero(scene.valid_len >= span)
    agent = int(rng.choice(candidates))
    start = int(rng.integers(0, scene.valid_len[agent] - span + 1))
    mask = np.zeros((scene.N, scene.T), dtype=bool)
    mask[agent, start : start + span] = True
    return mask


def prediction_mask(scene: Scene, rng: np.random.Generator, horizon: int = HORIZON) -> np.ndarray:
    """Mask the final ``horizon`` valid steps of one agent with more than ``horizon`` steps."""
    candidates = np.flatnonzero(scene.valid_len >= horizon + 1)
    mask = np.zeros((scene.N, scene.T), dtype=bool)
    if len(candidates) == 0:
        return mask
    agent = int(rng.choice(candidates))
    end = int(scene.valid_len[agent])
    mask[agent, end - horizon : end] = True
    return mask


def _task_mask(scene: Scene, task: str, rng, span: int) -> np.ndarray | None:
    if task == "mask_recovery":
        return pretrain_mask(scene, rng, span)
    if task == "trajectory":
        return prediction_mask(scene, rng, span)
    return None


def _stack_masks(masks: list[np.ndarray], shape) -> np.ndarray:
    out = np.zeros(shape[:3], dtype=bool)
    for i, m in enumerate(masks):
        out[i, : m.shape[0], : m.shape[1]] = m
    return out


def apply_pretrain_mask(scenes: Sequence[Scene], rng: np.random.Generator, span: int = HORIZON):
    """Batch the scenes and draw one masked span per scene; returns (batch, masked)."""
    bt = batch(scenes)
    return bt, _stack_masks([pretrain_mask(s, rng, span) for s in scenes], bt.shape)


# --------------------------------------------------------------------------
# loss / gradient for one batch


def batch_loss(model: Model, bt, task: str, masked=None, train=False, dropout=0.0, rng=None, grad=True):
    """Forward (and optionally backward) for one batch. Returns (loss, grads, predictions)."""
    if task in ("mask_recovery", "trajectory"):
        out, _, cache = model.encode(bt.x, bt.valid, bt.start_step, masked, train, dropout, rng)
        loss, dout = nn.mse(out, bt.x, masked[..., None])
        grads = model.encode_backward(cache, dout)[0] if grad else None
        return loss, grads, out
    if task == "eta":
        airborne = ~np.isnan(bt.eta_s) & bt.present
        out, hidden, cache = model.encode(bt.x, bt.valid, bt.start_step, None, train, dropout, rng)
        q = query_matrix(airborne, model.config.decoder_outputs, model.config.F)
        y, dcache = model.decode(hidden, q, bt.valid)
        mean, std = model.eta_scale
        target = np.where(airborne, (np.nan_to_num(bt.eta_s) - mean) / std, 0.0)
        loss, dy = nn.mse(y[..., 0], target, airborne)
        grads = None
        if grad:
            grads, dh = model.decode_backward(dcache, dy[..., None])
            grads, _ = model.encode_backward(cache, np.zeros_like(out), dh, grads)
        return loss, grads, y[..., 0] * std + mean
    raise ValueError(f"unknown task {task!r}")


def _loss_count(bt, task, masked) -> int:
    if task == "eta":
        return int((~np.isnan(bt.eta_s) & bt.present).sum())
    return int(masked.sum())


def scenes_loss(model: Model, scenes: Sequence[Scene], masks, task: str, train=False, dropout=0.0, rng=None, grad=True):
    """Same loss and gradient as ``batch_loss`` on the padded batch, computed scene by scene.

    Attention cost grows with the square of the padded slot count, so running
    each scene at its own size is much cheaper than padding to the largest one.
    Per-scene means are recombined with weights proportional to their element
    counts. Returns (loss, grads).
    """
    parts = []
    for s, m in zip(scenes, masks):
        bt = batch([s])
        masked = None if m is None else m[None]
        n = _loss_count(bt, task, masked)
        if n:
            parts.append((bt, masked, n))
    if not parts:
        raise ValueError("no valid loss elements in batch")
    total = sum(n for _, _, n in parts)
    loss, grads = 0.0, {} if grad else None
    for bt, masked, n in parts:
        li, gi, _ = batch_loss(model, bt, task, masked, train, dropout, rng, grad)
        w = n / total
        loss += w * li
        if grad:
            for k, g in gi.items():
                if k in grads:
                    grads[k] += w * g
                else:
                    grads[k] = w * g
    return loss, grads


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def mean_loss(model: Model, scenes: Sequence[Scene], task: str, seed: int, batch_size: int = 8, span: int = HORIZON):
    """Deterministic loss over normalized scenes (masks keyed on each window)."""
    if not scenes:
        return None
    total, count = 0.0, 0
    for chunk in _batches(list(scenes), batch_size):
        masks = [_task_mask(s, task, scene_rng(seed, s), span) for s in chunk]
        loss, _ = scenes_loss(model, chunk, masks, task, grad=False)
        total += loss * len(chunk)
        count += len(chunk)
    return total / count


def fit(
    model: Model,
    train: Sequence[Scene],
    val: Sequence[Scene],
    plan: ExperimentPlan,
    task: str,
    dropout: float,
    log: RunLog | None = None,
    tag: str = "",
) -> list[tuple[int, float, float | None]]:
    """Adam training loop over normalized scenes; returns (epoch, train, val) losses."""
    if not train:
        raise ValueError("no training scenes")
    rng = np.random.default_rng(plan.seed)
    opt = nn.Adam(lr=plan.lr)
    curve = []
    train = list(train)
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses, weights = [], []
        for b_idx, chunk_idx in enumerate(_batches(order, plan.batch_size)):
            chunk = [train[i] for i in chunk_idx]
            if plan.fixed_masks:
                masks = [_task_mask(s, task, scene_rng(plan.seed, s), plan.mask_steps) for s in chunk]
            else:
                masks = [_task_mask(s, task, rng, plan.mask_steps) for s in chunk]
            try:
                loss, grads = scenes_loss(model, chunk, masks, task, True, dropout, rng)
            except nn.NonFiniteError as exc:
                raise DivergenceError(f"diverged at epoch {epoch}, batch {b_idx}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"loss is {loss} at epoch {epoch}, batch {b_idx}")
            opt.step(model.params, grads)
            losses.append(loss)
            weights.append(len(chunk))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = mean_loss(model, val, task, plan.seed, plan.batch_size, plan.mask_steps)
        curve.append((epoch, train_loss, val_loss))
        # timing goes to the process log only so run logs stay reproducible
        _log.debug("%s epoch %d took %.3f s", tag, epoch, time.perf_counter() - t0)
        if log is not None:
            log.log("epoch", tag=tag, epoch=epoch, split="train", loss=train_loss)
            if val_loss is not None:
                log.log("epoch", tag=tag, epoch=epoch, split="val", loss=val_loss)
    return curve


# --------------------------------------------------------------------------
# workflows


@dataclass
class RunResult:
    model: Model
    curve: list[tuple[int, float, float | None]]
    report: MetricsReport | None = None
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0

    @property
    def final_val_loss(self) -> float | None:
        return self.curve[-1][2] if self.curve else None


def _prepare(model: Model, scenes: Sequence[Scene], task: str, plan: ExperimentPlan):
    train, val, test = split_scenes([s for s in scenes if eligible(s, task, plan.mask_steps)])
    if not train:
        raise ValueError(f"no scenes usable for task {task!r}")
    train = subsample(train, plan.data_fraction, plan.seed)
    if model.normalizer is None:
        model.normalizer = Normalizer.fit(train)
    norm = model.normalizer
    return train, [norm.normalize(s) for s in train], [norm.normalize(s) for s in val], test


def pretrain(model: Model, scenes: Sequence[Scene], plan: ExperimentPlan, log: RunLog | None = None) -> RunResult:
    """Masked-span recovery over an 80/10/10 chronological split."""
    if plan.mode != "pretrain":
        raise ValueError("pretrain needs a plan with mode='pretrain'")
    _, train, val, test = _prepare(model, scenes, "mask_recovery", plan)
    curve = fit(model, train, val, plan, "mask_recovery", model.config.dropout_pretrain, log, tag="pretrain")
    return RunResult(model, curve, None, len(train), len(val), len(test))


def finetune_trajectory(model: Model, scenes: Sequence[Scene], plan: ExperimentPlan, log: RunLog | None = None) -> RunResult:
    """Predict the last ``mask_steps`` valid steps of one agent per scene."""
    _, train, val, test = _prepare(model, scenes, "trajectory", plan)
    curve = fit(model, train, val, plan, "trajectory", model.config.dropout_finetune, log, tag=plan.mode)
    report = evaluate(model, test, "trajectory", seed=plan.seed, horizon=plan.mask_steps) if test else None
    return RunResult(model, curve, report, len(train), len(val), len(test))


def fit_eta_scale(scenes: Sequence[Scene]) -> tuple[float, float]:
    labels = np.concatenate([s.eta_s[s.airborne()] for s in scenes])
    std = float(labels.std())
    return float(labels.mean()), std if std > 0 else 1.0


def finetune_eta(model: Model, scenes: Sequence[Scene], plan: ExperimentPlan, log: RunLog | None = None) -> RunResult:
    """Regress seconds-to-terminus for every agent airborne at the end of its window."""
    if not model.config.decoder_outputs:
        model.add_decoder(1, seed=plan.seed)
    raw_train, train, val, test = _prepare(model, scenes, "eta", plan)
    if model.eta_scale is None:
        model.eta_scale = fit_eta_scale(raw_train)
    curve = fit(model, train, val, plan, "eta", model.config.dropout_finetune, log, tag=plan.mode)
    report = evaluate(model, test, "eta", seed=plan.seed) if test else None
    return RunResult(model, curve, report, len(train), len(val), len(test))


def run_task(model: Model, scenes: Sequence[Scene], plan: ExperimentPlan, log: RunLog | None = None) -> RunResult:
    if plan.task == "mask_recovery":
        return pretrain(model, scenes, plan, log)
    if plan.task == "trajectory":
        return finetune_trajectory(model, scenes, plan, log)
    return finetune_eta(model, scenes, plan, log)


def evaluate(model: Model, scenes: Sequence[Scene], task: str, seed: int = 0, horizon: int = HORIZON, batch_size: int = 8) -> MetricsReport:
    """Metrics on raw held-out scenes with dropout off and deterministic masks."""
    t0 = time.perf_counter()
    scenes = [s for s in scenes if eligible(s, task, horizon)]
    if not scenes:
        raise ValueError("empty evaluation set")
    if model.normalizer is None:
        raise ValueError("model has no normalizer; train it first")
    norm = model.normalizer
    he, ve, err, losses = [], [], [], []
    for chunk in _batches(scenes, batch_size):
        normed = [norm.normalize(s) for s in chunk]
        bt = batch(normed)
        if task == "eta":
            loss, _, pred = batch_loss(model, bt, "eta", grad=False)
            for i, s in enumerate(chunk):
                air = s.airborne()
                err.append(pred[i, : s.N][air] - s.eta_s[air])
        else:
            masks = [_task_mask(s, task, scene_rng(seed, s), horizon) for s in chunk]
            masked = _stack_masks(masks, bt.shape)
            loss, _, out = batch_loss(model, bt, task, masked, grad=False)
            for i, s in enumerate(chunk):
                sel = masks[i]
                pred = norm.denormalize_array(out[i, : s.N, : s.T], s)[sel]
                true = s.data[sel]
                he.append(np.atleast_1d(horizontal_error(pred[:, :2], true[:, :2])))
                ve.append(vertical_error(pred[:, 2], true[:, 2]))
        losses.append(loss * len(chunk))
    loss = float(sum(losses) / len(scenes))
    wall = time.perf_counter() - t0
    if task == "eta":
        e = np.concatenate(err)
        return MetricsReport(
            "eta", len(e), MAE_s=float(np.mean(np.abs(e))), RMSE_s=float(np.sqrt(np.mean(e * e))), loss=loss, wall_time_s=wall
        )
    he_all, ve_all = np.concatenate(he), np.concatenate(ve)
    return MetricsReport(task, len(he_all), HE_nm=float(he_all.mean()), VE_ft=float(ve_all.mean()), loss=loss, wall_time_s=wall)


def constant_eta_baseline(train: Sequence[Scene], test: Sequence[Scene]) -> MetricsReport:
    """Predict the mean training ETA for every airborne agent."""
    mean = fit_eta_scale([s for s in train if eligible(s, "eta")])[0]
    e = np.concatenate([s.eta_s[s.airborne()] - mean for s in test if eligible(s, "eta")])
    return MetricsReport("eta", len(e), MAE_s=float(np.mean(np.abs(e))), RMSE_s=float(np.sqrt(np.mean(e * e))))


def data_fraction_run(
    pretrained: Model, scenes: Sequence[Scene], fractions: Sequence[float], plan: ExperimentPlan, log: RunLog | None = None
) -> list[tuple[float, RunResult]]:
    """Fine-tune copies of ``pretrained`` on seeded subsets of the training split.

    Validation and test splits are identical across fractions.
    """
    rows = []
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"fraction {frac} outside (0, 1]")
        sub_plan = replace(plan, data_fraction=float(frac))
        if log is not None:
            log.log("fraction", fraction=float(frac))
        rows.append((float(frac), run_task(pretrained.copy(), scenes, sub_plan, log)))
    return rows


# --------------------------------------------------------------------------
# incremental learning


def period_key(window_start: float, period: str, origin: float) -> int:
    if period == "day":
        return int((window_start - origin) // 86400)
    if period == "week":
        return int((window_start - origin) // (7 * 86400))
    dt = datetime.fromtimestamp(window_start, tz=timezone.utc)
    o = datetime.fromtimestamp(origin, tz=timezone.utc)
    return (dt.year - o.year) * 12 + dt.month - o.month


@dataclass
class IncrementalResult:
    model: Model
    periods: list[tuple[int, MetricsReport | None, int]]  # (period, report on incoming data, scenes trained)
    overall: MetricsReport | None
    overfit_prone: bool
    log: RunLog = field(repr=False, default=None)


def incremental_run(
    pretrained: Model, scenes: Sequence[Scene], period: str, plan: ExperimentPlan, log: RunLog | None = None
) -> IncrementalResult:
    """Prequential updates: evaluate on each incoming period, then train on it."""
    if period not in PERIODS:
        raise ValueError(f"period must be one of {PERIODS}")
    task = plan.task
    log = log or RunLog()
    model = pretrained.copy()
    if task == "eta":
        if not model.config.decoder_outputs:
            model.add_decoder(1, seed=plan.seed)
        if model.eta_scale is None:
            model.eta_scale = (0.0, 600.0)
    if model.normalizer is None:
        raise ValueError("incremental learning starts from a model with a normalizer")
    ordered = sorted(scenes, key=lambda s: s.window_start)
    if not ordered:
        raise ValueError("empty scene stream")
    day0 = ordered[0].window_start - (ordered[0].window_start % 86400)
    groups: dict[int, list[Scene]] = {}
    for s in ordered:
        groups.setdefault(period_key(s.window_start, period, day0), []).append(s)

    rows = []
    for key in range(min(groups), max(groups) + 1):
        incoming = [s for s in groups.get(key, []) if eligible(s, task, plan.mask_steps)]
        ids = [int(round(s.window_start)) for s in incoming]
        if not incoming:
            log.log("evaluate", period=key, n=0, scenes=[])
            log.log("skip_update", period=key)
            rows.append((key, None, 0))
            continue
        report = evaluate(model, incoming, task, seed=plan.seed, horizon=plan.mask_steps, batch_size=plan.batch_size)
        log.log("evaluate", period=key, n=len(incoming), scenes=ids, **report.metrics())
        normed = [model.normalizer.normalize(s) for s in incoming]
        fit(model, normed, [], replace(plan, seed=plan.seed + key), task, model.config.dropout_finetune)
        log.log("train", period=key, n=len(incoming), scenes=ids)
        rows.append((key, report, len(incoming)))

    reports = [r for _, r, _ in rows if r is not None]
    overall = _pool_reports(reports, task)
    trained = [n for _, _, n in rows if n]
    overfit = bool(trained) and float(np.mean(trained)) < OVERFIT_MIN_SCENES
    log.log("summary", period=period, updates=len(trained), overfit_prone=int(overfit))
    return IncrementalResult(model, rows, overall, overfit, log)


def _pool_reports(reports: Sequence[MetricsReport], task: str) -> MetricsReport | None:
    if not reports:
        return None
    w = np.array([r.n_samples for r in reports], dtype=float)
    n = int(w.sum())
    if task == "eta":
        mae = float(np.average([r.MAE_s for r in reports], weights=w))
        rmse = float(np.sqrt(np.average([r.RMSE_s**2 for r in reports], weights=w)))
        return MetricsReport("eta", n, MAE_s=mae, RMSE_s=rmse)
    return MetricsReport(
        task,
        n,
        HE_nm=float(np.average([r.HE_nm for r in reports], weights=w)),
        VE_ft=float(np.average([r.VE_ft for r in reports], weights=w)),
    )


def prequential_violations(records: Sequence[dict]) -> int:
    """Count scenes that appear in a train event before any evaluate event."""
    seen: set[str] = set()
    bad = 0
    for rec in records:
        scenes = rec.get("scenes", [])
        if isinstance(scenes, str):
            scenes = [s for s in scenes.split(",") if s]
        scenes = [str(s) for s in scenes]
        if rec.get("event") == "evaluate":
            seen.update(scenes)
        elif rec.get("event") == "train":
            bad += sum(1 for s in scenes if s not in seen)
    return bad
