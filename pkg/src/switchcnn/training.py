"""Pretraining, differential training, switch training and coupled training.

Regressor labels are 0-based indices into the list of regressors in use
(index 0 is R1).  Every SGD step uses a single patch.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import neural
from .formats import write_json
from .ground_truth import KernelConfig, PointSet, density_map
from .neural import Regressor, SwitchClassifier, backward, l2_loss, sgd_step, to_batch
from .patch_grid import OUTPUT_FACTOR, GridSpec, split_density, split_scene

STAGES = ("pretrain", "differential", "switch", "coupled")


@dataclass
class PatchSample:
    pixels: np.ndarray
    target: np.ndarray
    gt_count: float
    points: PointSet
    scene_id: str
    grid_index: tuple[int, int]
    roi: np.ndarray | None = None
    regime: int | None = None

    @property
    def key(self) -> tuple[str, tuple[int, int]]:
        return (self.scene_id, self.grid_index)


def downsample_mask(mask: np.ndarray, factor: int = OUTPUT_FACTOR) -> np.ndarray:
    """Nearest-neighbour mask at output resolution (block centres)."""
    h, w = mask.shape
    ri = np.minimum(np.arange(0, h, factor) + factor // 2, h - 1)
    ci = np.minimum(np.arange(0, w, factor) + factor // 2, w - 1)
    return mask[np.ix_(ri, ci)]


def make_patch_samples(scenes: Sequence, grid: GridSpec = GridSpec(),
                       kernel: KernelConfig = KernelConfig()) -> list[PatchSample]:
    """Cut scenes into grid patches with 1/4-resolution density targets."""
    samples = []
    for scene in scenes:
        targets = split_density(density_map(scene.points, kernel), grid)
        for rec in split_scene(scene, grid):
            target = targets[rec.grid_index].astype(np.float32)
            roi = None
            if rec.roi is not None:
                roi = downsample_mask(rec.roi).astype(np.float32)
            gt = float(np.sum(target, dtype=np.float64) if roi is None
                       else np.sum(target * roi, dtype=np.float64))
            regime = None if scene.regimes is None else int(scene.regimes[rec.grid_index])
            samples.append(PatchSample(rec.pixels.astype(np.float32), target, gt, rec.points,
                                       scene.id, rec.grid_index, roi, regime))
    return samples


@dataclass
class TrainConfig:
    T_p: int = 20
    T_d: int = 10
    T_s: int = 1
    T_c: int = 10
    plateau_patience: int = 5
    plateau_min_delta: float = 0.1
    lr: float = 1e-5
    momentum: float = 0.9
    switch_lr: float = 1e-3
    switch_momentum: float = 0.9
    balance: str = "oversample"
    # global gradient-norm cap for regressor steps; None is plain SGD
    grad_clip: float | None = None
    # restore the best-validation parameters when a stage ends
    keep_best: bool = False
    # regressor learning rate after pretraining; None keeps ``lr``
    finetune_lr: float | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("T_p", "T_d", "T_s", "T_c"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 or None")
        if self.finetune_lr is not None and self.finetune_lr < 0:
            raise ValueError("finetune_lr must be >= 0 or None")
        if self.balance not in ("oversample", "undersample"):
            raise ValueError(f"unknown balance mode {self.balance!r}")

    def finetuning(self) -> TrainConfig:
        """The config regressor steps use in differential and coupled training."""
        return self if self.finetune_lr is None else replace(self, lr=self.finetune_lr)


class Plateau:
    """Stop once the monitored error fails to improve by ``min_delta`` ``patience`` times in a row."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


class BestState:
    """Snapshot of the models seen at the lowest monitored error so far."""

    def __init__(self, models, enabled: bool = True):
        self.models = [m for m in models if m is not None]
        self.enabled = enabled
        self.best = math.inf
        self.state = None

    def update(self, value: float):
        if self.enabled and value < self.best:
            self.best = value
            self.state = [({k: v.clone() for k, v in m.state_dict().items()},
                           {k: v.clone() for k, v in m.momentum_buffers.items()})
                          for m in self.models]

    def restore(self):
        if self.state is None:
            return
        for m, (params, bufs) in zip(self.models, self.state):
            m.load_state_dict(params)
            m.momentum_buffers = {k: v.clone() for k, v in bufs.items()}


class TrainLog:
    """Line-delimited ``key=value`` records separated by tabs."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **fields):
        self.records.append(fields)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write("\t".join(f"{k}={_fmt(v)}" for k, v in fields.items()) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_log_line(line: str) -> dict:
    out = {}
    for item in line.rstrip("\n").split("\t"):
        k, _, v = item.partition("=")
        out[k] = v
    return out


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


# --- counts and labels -------------------------------------------------------

def sample_counts(reg: Regressor, sample: PatchSample) -> float:
    return neural.predicted_count(neural.forward_density(reg, sample.pixels), sample.roi)


def count_matrix(regressors: Sequence[Regressor], samples: Sequence[PatchSample]) -> np.ndarray:
    """``(N, K)`` predicted counts, one single-patch forward per entry."""
    return np.array([[sample_counts(r, s) for r in regressors] for s in samples]).reshape(
        len(samples), len(regressors))


def best_label(counts, gt_count: float) -> tuple[int, float]:
    """Index of the regressor with the smallest absolute count error, and that error.

    Ties go to the lowest index.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if not np.all(np.isfinite(counts)) or not math.isfinite(gt_count):
        raise ValueError(f"non-finite count in {counts.tolist()} / {gt_count}")
    err = np.abs(counts - gt_count)
    k = int(np.argmin(err))
    return k, float(err[k])


@dataclass
class RoutingLabels:
    labels: np.ndarray
    errors: np.ndarray

    @classmethod
    def from_counts(cls, counts: np.ndarray, gts) -> RoutingLabels:
        pairs = [best_label(c, g) for c, g in zip(counts, gts)]
        return cls(np.array([p[0] for p in pairs], dtype=int),
                   np.array([p[1] for p in pairs], dtype=np.float64))


def ideal_mae(counts: np.ndarray, gts) -> float:
    """Mean over samples of the smallest per-regressor absolute count error."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape[0] == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.min(np.abs(counts - np.asarray(gts, dtype=np.float64)[:, None]), axis=1)))


def minimal_achievable_mae(regressors: Sequence[Regressor], samples: Sequence[PatchSample]) -> float:
    if len(samples) == 0:
        raise ValueError("empty dataset")
    return ideal_mae(count_matrix(regressors, samples), [s.gt_count for s in samples])


def compute_labels(regressors, samples) -> RoutingLabels:
    return RoutingLabels.from_counts(count_matrix(regressors, samples), [s.gt_count for s in samples])


# --- routers -----------------------------------------------------------------

class OracleRouter:
    """Routes each patch to its best regressor given the regressors' current state."""

    def __init__(self, regressors: Sequence[Regressor]):
        self.regressors = regressors

    def route_one(self, sample: PatchSample) -> int:
        return best_label([sample_counts(r, sample) for r in self.regressors], sample.gt_count)[0]


class FixedRouter:
    def __init__(self, samples: Sequence[PatchSample], labels):
        self.table = {s.key: int(k) for s, k in zip(samples, labels)}

    def route_one(self, sample: PatchSample) -> int:
        return self.table[sample.key]


class ConstantRouter:
    def __init__(self, index: int = 0):
        self.index = index

    def route_one(self, sample: PatchSample) -> int:
        return self.index


def route_all(router, samples) -> np.ndarray:
    return np.array([router.route_one(s) for s in samples], dtype=int)


# --- regressor updates -------------------------------------------------------

def _sample_tensors(reg: Regressor, sample: PatchSample):
    dtype = next(reg.parameters()).dtype
    x = to_batch(sample.pixels, dtype)
    y = torch.as_tensor(sample.target, dtype=dtype)[None, None]
    roi = None if sample.roi is None else torch.as_tensor(sample.roi, dtype=dtype)[None, None]
    return x, y, roi


def regressor_step(reg: Regressor, sample: PatchSample, cfg: TrainConfig, pred=None) -> float:
    """One l2 SGD step on a single patch; returns the loss before the update."""
    x, y, roi = _sample_tensors(reg, sample)
    if pred is None:
        pred = reg(x)
    loss = l2_loss(pred, y, 1, roi)
    sgd_step(reg, neural.clip_gradients(backward(reg, loss), cfg.grad_clip), cfg.lr, cfg.momentum)
    return float(loss.detach())


StepHook = Callable[[str, int, int, int], None]


def differential_epoch(regressors: Sequence[Regressor], samples: Sequence[PatchSample],
                       order, cfg: TrainConfig, router=None, stage: str = "differential",
                       epoch: int = 0, on_step: StepHook | None = None) -> tuple[float, np.ndarray]:
    """Visit ``samples`` in ``order``; update only the chosen regressor per patch.

    Without a router the choice is the count-error argmin (computed with the
    regressors' current parameters); with one, ``router.route_one`` decides.
    Returns the mean loss and the chosen index per visited patch.
    """
    losses, chosen = [], []
    for i in order:
        s = samples[i]
        if router is None:
            preds = []
            for r in regressors:
                x, _, _ = _sample_tensors(r, s)
                preds.append(r(x))
            counts = [neural.predicted_count(p[0, 0].detach().numpy(), s.roi) for p in preds]
            k, _ = best_label(counts, s.gt_count)
            losses.append(regressor_step(regressors[k], s, cfg, pred=preds[k]))
        else:
            k = router.route_one(s)
            losses.append(regressor_step(regressors[k], s, cfg))
        chosen.append(k)
        if on_step is not None:
            on_step(stage, epoch, int(i), k)
    return float(np.mean(losses)) if losses else 0.0, np.array(chosen, dtype=int)


def pretrain(regressors: Sequence[Regressor], train: Sequence[PatchSample],
             val: Sequence[PatchSample], cfg: TrainConfig, log: TrainLog | None = None) -> list[dict]:
    """Train every regressor on all patches until ``T_p`` or a validation plateau."""
    if not train or not val:
        raise ValueError("pretraining needs non-empty train and validation sets")
    log = log or TrainLog()
    history = []
    val_gt = np.array([s.gt_count for s in val])
    for k, reg in enumerate(regressors):
        stop = Plateau(cfg.plateau_patience, cfg.plateau_min_delta)
        best = BestState([reg], cfg.keep_best)
        for epoch in range(1, cfg.T_p + 1):
            order = _rng(cfg.seed, 1, k, epoch).permutation(len(train))
            loss = float(np.mean([regressor_step(reg, train[i], cfg) for i in order]))
            val_counts = np.array([sample_counts(reg, s) for s in val])
            val_mae = float(np.mean(np.abs(val_counts - val_gt)))
            reg.epoch += 1
            rec = dict(stage="pretrain", regressor=reg.name, epoch=epoch,
                       train_loss=loss, val_mae=val_mae)
            history.append(rec)
            log.write(**rec)
            best.update(val_mae)
            if stop.update(val_mae):
                break
        best.restore()
    return history


def differential_train(regressors: Sequence[Regressor], train: Sequence[PatchSample],
                       val: Sequence[PatchSample], cfg: TrainConfig, log: TrainLog | None = None,
                       on_step: StepHook | None = None):
    """Argmin-routed training until ``T_d`` or a plateau of the validation ideal MAE."""
    log = log or TrainLog()
    history = []
    stop = Plateau(cfg.plateau_patience, cfg.plateau_min_delta)
    best = BestState(regressors, cfg.keep_best)
    for epoch in range(1, cfg.T_d + 1):
        order = _rng(cfg.seed, 2, epoch).permutation(len(train))
        loss, chosen = differential_epoch(regressors, train, order, cfg.finetuning(), epoch=epoch,
                                          on_step=on_step)
        val_mae = minimal_achievable_mae(regressors, val)
        rec = dict(stage="differential", epoch=epoch, train_loss=loss, val_mae=val_mae,
                   group_sizes=",".join(str(int((chosen == k).sum())) for k in range(len(regressors))))
        history.append(rec)
        log.write(**rec)
        best.update(val_mae)
        if stop.update(val_mae):
            break
    best.restore()
    labels = compute_labels(regressors, train)
    log.write(stage="differential", epoch="final", E_C=float(labels.errors.mean()))
    return labels, history


# --- switch ------------------------------------------------------------------

def make_switch_dataset(labels, seed: int, num_classes: int = 3,
                        mode: str = "oversample") -> np.ndarray:
    """Balanced multiset of sample indices ``(M, 2)`` as ``[index, label]`` rows.

    Oversampling keeps every member and tops smaller classes up by drawing
    with replacement; undersampling draws every class down to the smallest.
    """
    labels = np.asarray(labels, dtype=int)
    groups = [np.flatnonzero(labels == k) for k in range(num_classes)]
    for k, g in enumerate(groups):
        if len(g) == 0:
            raise ValueError(f"class {k} (R{k + 1}) has no members; cannot balance")
    rng = np.random.default_rng(seed)
    sizes = [len(g) for g in groups]
    rows = []
    for k, g in enumerate(groups):
        if mode == "oversample":
            picked = np.concatenate([g, rng.choice(g, max(sizes) - len(g), replace=True)])
        elif mode == "undersample":
            picked = np.sort(rng.choice(g, min(sizes), replace=False))
        else:
            raise ValueError(f"unknown balance mode {mode!r}")
        rows.append(np.stack([picked, np.full(len(picked), k)], axis=1))
    return np.concatenate(rows)


def _balance_present(labels, seed: int, num_classes: int, mode: str, log: TrainLog, **where):
    """Balance over the classes that still have members.

    A regressor can lose every patch mid-training; the switch then keeps
    learning the remaining classes instead of aborting the run.
    """
    labels = np.asarray(labels, dtype=int)
    present = [k for k in range(num_classes) if np.any(labels == k)]
    if len(present) < num_classes:
        log.write(**where, empty_classes=",".join(str(k) for k in range(num_classes)
                                                  if k not in present))
    remap = np.full(num_classes, -1)
    remap[present] = np.arange(len(present))
    bal = make_switch_dataset(remap[labels], seed, num_classes=len(present), mode=mode)
    bal[:, 1] = np.asarray(present)[bal[:, 1]]
    return bal


def train_switch_epoch(switch: SwitchClassifier, samples: Sequence[PatchSample], balanced: np.ndarray,
                       cfg: TrainConfig, epoch: int = 0) -> float:
    """One pass of single-patch softmax cross-entropy SGD; returns running accuracy."""
    if len(balanced) == 0:
        raise ValueError("balanced switch set is empty")
    order = _rng(cfg.seed, 3, epoch).permutation(len(balanced))
    dtype = next(switch.parameters()).dtype
    hits = 0
    for j in order:
        i, k = balanced[j]
        logits = switch(to_batch(samples[i].pixels, dtype))
        hits += int(torch.argmax(logits[0]).item() == k)
        loss = F.cross_entropy(logits, torch.tensor([int(k)]))
        sgd_step(switch, backward(switch, loss), cfg.switch_lr, cfg.switch_momentum)
    switch.epoch += 1
    return hits / len(balanced)


def routed_mae(regressors, router, samples) -> float:
    routes = route_all(router, samples)
    return float(np.mean([abs(sample_counts(regressors[k], s) - s.gt_count)
                          for k, s in zip(routes, samples)]))


def switch_train(regressors, switch, train, val, labels: RoutingLabels, cfg: TrainConfig,
                 epochs: int, log: TrainLog | None = None, stage: str = "switch") -> list[dict]:
    """Train the switch alone on fixed labels; regressors are not touched."""
    log = log or TrainLog()
    history = []
    stop = Plateau(cfg.plateau_patience, cfg.plateau_min_delta)
    best = BestState([switch], cfg.keep_best)
    for epoch in range(1, epochs + 1):
        balanced = _balance_present(labels.labels, cfg.seed * 1000 + 500 + epoch,
                                    len(regressors), cfg.balance, log, stage=stage, epoch=epoch)
        acc = train_switch_epoch(switch, train, balanced, cfg, epoch=500 + epoch)
        val_mae = routed_mae(regressors, switch, val)
        rec = dict(stage=stage, epoch=epoch, switch_acc=acc, val_mae=val_mae)
        history.append(rec)
        log.write(**rec)
        best.update(val_mae)
        if stop.update(val_mae):
            break
    best.restore()
    return history


def coupled_train(regressors, switch, train, val, cfg: TrainConfig, log: TrainLog | None = None,
                  on_stage: Callable[[str, int], None] | None = None,
                  on_step: StepHook | None = None) -> list[dict]:
    """Alternate: relabel by argmin, one switch epoch, one switch-routed regressor epoch."""
    log = log or TrainLog()
    history = []
    stop = Plateau(cfg.plateau_patience, cfg.plateau_min_delta)
    best = BestState([*regressors, switch], cfg.keep_best)
    # oracle labels can be taken before or after this stage; both are reported
    ideal_before = minimal_achievable_mae(regressors, val)
    for epoch in range(1, cfg.T_c + 1):
        if on_stage:
            on_stage("relabel", epoch)
        labels = compute_labels(regressors, train)
        if on_stage:
            on_stage("switch", epoch)
        balanced = _balance_present(labels.labels, cfg.seed * 1000 + epoch,
                                    len(regressors), cfg.balance, log, stage="coupled", epoch=epoch)
        acc = train_switch_epoch(switch, train, balanced, cfg, epoch=epoch)
        if on_stage:
            on_stage("switched_differential", epoch)
        order = _rng(cfg.seed, 4, epoch).permutation(len(train))
        loss, chosen = differential_epoch(regressors, train, order, cfg.finetuning(), router=switch,
                                          stage="coupled", epoch=epoch, on_step=on_step)
        val_mae = routed_mae(regressors, switch, val)
        rec = dict(stage="coupled", epoch=epoch, train_loss=loss, val_mae=val_mae, switch_acc=acc,
                   E_C=float(labels.errors.mean()),
                   group_sizes=",".join(str(int((chosen == k).sum())) for k in range(len(regressors))))
        history.append(rec)
        log.write(**rec)
        best.update(val_mae)
        if stop.update(val_mae):
            break
    best.restore()
    log.write(stage="coupled", epoch="final", val_ideal_mae_before=ideal_before,
              val_ideal_mae_after=minimal_achievable_mae(regressors, val),
              val_mae=routed_mae(regressors, switch, val))
    return history


# --- the whole pipeline ------------------------------------------------------

@dataclass
class ModelConfig:
    regressors: tuple[str, ...] = ("R1", "R2", "R3")
    width: float = 1.0
    init_std: float | None = 0.01
    switch: neural.SwitchConfig = field(default_factory=neural.SwitchConfig)


@dataclass
class SwitchCNN:
    regressors: list[Regressor]
    switch: SwitchClassifier | None
    history: list[dict] = field(default_factory=list)
    labels: RoutingLabels | None = None

    @property
    def router(self):
        return self.switch if self.switch is not None else ConstantRouter(0)


def build_models(mcfg: ModelConfig, seed: int) -> SwitchCNN:
    regs = [neural.build_regressor(neural.DEFAULT_SPECS[n].scaled(mcfg.width), seed=seed * 10 + i,
                                   init_std=mcfg.init_std)
            for i, n in enumerate(mcfg.regressors)]
    sw = None
    if len(regs) > 1:
        scfg = neural.SwitchConfig(**{**asdict(mcfg.switch), "num_classes": len(regs),
                                      "seed": seed * 10 + 9})
        sw = neural.SwitchClassifier(scfg)
    return SwitchCNN(regs, sw)


def save_stage(model: SwitchCNN, directory, stage: str) -> Path:
    """Write a stage checkpoint; it appears under ``directory`` only once complete."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        for reg in model.regressors:
            neural.save_model(reg, tmp / reg.name, stage=stage)
        if model.switch is not None:
            neural.save_model(model.switch, tmp / "switch", stage=stage)
        state = {"stage": stage, "regressors": [r.name for r in model.regressors],
                 "has_switch": model.switch is not None}
        if model.labels is not None:
            state["labels"] = model.labels.labels.tolist()
            state["label_errors"] = [float(e) for e in model.labels.errors]
        write_json(tmp / "state.json", state)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_stage(directory) -> SwitchCNN:
    directory = Path(directory)
    state_path = directory / "state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"stage checkpoint not found: {directory}")
    state = json.loads(state_path.read_text())
    regs = [neural.load_model(directory / n) for n in state["regressors"]]
    sw = neural.load_model(directory / "switch") if state["has_switch"] else None
    labels = None
    if "labels" in state:
        labels = RoutingLabels(np.array(state["labels"], dtype=int),
                               np.array(state["label_errors"], dtype=np.float64))
    return SwitchCNN(regs, sw, labels=labels)


def run_pipeline(train, val, cfg: TrainConfig, mcfg: ModelConfig = ModelConfig(),
                 out_dir=None, log: TrainLog | None = None, coupled: bool = True,
                 start: SwitchCNN | None = None, start_after: str | None = None,
                 stop_after: str | None = None) -> SwitchCNN:
    """Run the training stages in order, checkpointing each into ``out_dir/<stage>``.

    ``coupled=False`` replaces the coupled stage by ``T_c`` epochs of
    stand-alone switch training on the fixed differential labels.  With
    ``start``/``start_after`` the stages up to and including ``start_after``
    are skipped; with ``stop_after`` the run ends once that stage is checkpointed.
    """
    torch.manual_seed(cfg.seed)
    log = log or TrainLog()
    model = start if start is not None else build_models(mcfg, cfg.seed)
    done = -1 if start_after is None else STAGES.index(start_after)
    last = len(STAGES) - 1 if stop_after is None else STAGES.index(stop_after)

    def ckpt(stage):
        if out_dir is not None:
            save_stage(model, Path(out_dir) / stage, stage)

    if done < 0:
        model.history += pretrain(model.regressors, train, val, cfg, log)
        ckpt("pretrain")
    if len(model.regressors) == 1 or last < 1:
        return model
    if done < 1:
        model.labels, h = differential_train(model.regressors, train, val, cfg, log)
        model.history += h
        ckpt("differential")
    if last < 2:
        return model
    if model.labels is None:
        model.labels = compute_labels(model.regressors, train)
    if done < 2:
        epochs = cfg.T_s if coupled else cfg.T_c
        model.history += switch_train(model.regressors, model.switch, train, val, model.labels,
                                      cfg, epochs, log)
        ckpt("switch")
    if coupled and done < 3 and last >= 3:
        model.history += coupled_train(model.regressors, model.switch, train, val, cfg, log)
        ckpt("coupled")
    return model
