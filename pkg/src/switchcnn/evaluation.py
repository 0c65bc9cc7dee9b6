"""Count metrics, routed evaluation, attribute-clustering baselines and ablations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neural
from .ground_truth import KernelConfig, patch_mean_interhead_distance
from .patch_grid import GridSpec, assemble_density
from .training import (ConstantRouter, FixedRouter, ModelConfig, OracleRouter, PatchSample,
                       RoutingLabels, SwitchCNN, TrainConfig, TrainLog, best_label, build_models,
                       differential_epoch, make_patch_samples, pretrain, route_all, run_pipeline,
                       switch_train, _rng)


def _pair(preds, gts):
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise ValueError("cannot score an empty sequence")
    return preds, gts


def mae(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g)))


def mse(preds, gts) -> float:
    """Root of the mean squared count error (the crowd-counting "MSE")."""
    p, g = _pair(preds, gts)
    return float(np.sqrt(np.mean((p - g) ** 2)))


@dataclass
class SceneRecord:
    scene_id: str
    gt_count: float
    pred_count: float
    ideal_count: float
    routes: list[int]
    best: list[int]


@dataclass
class EvalReport:
    mae: float
    mse: float
    switch_accuracy: float
    ideal_switch_mae: float
    patch_mae: float
    ideal_patch_mae: float
    scenes: list[SceneRecord] = field(default_factory=list)
    regressor_names: list[str] = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in
                ("mae", "mse", "switch_accuracy", "ideal_switch_mae", "patch_mae", "ideal_patch_mae")}

    def to_text(self) -> str:
        """``key=value`` metric lines, a blank line, then a tab-separated scene table."""
        lines = [f"{k}={v!r}" for k, v in self.metrics().items()]
        lines.append(f"num_scenes={len(self.scenes)}")
        lines.append(f"regressors={','.join(self.regressor_names)}")
        lines.append("")
        lines.append("scene_id\tgt_count\tpred_count\tideal_count\troutes\tbest")
        for s in self.scenes:
            lines.append(f"{s.scene_id}\t{s.gt_count!r}\t{s.pred_count!r}\t{s.ideal_count!r}\t"
                         f"{''.join(map(str, s.routes))}\t{''.join(map(str, s.best))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> EvalReport:
        head, _, table = text.partition("\n\n")
        kv = dict(line.split("=", 1) for line in head.splitlines())
        names = kv.pop("regressors")
        kv.pop("num_scenes")
        rows = []
        for line in table.splitlines()[1:]:
            sid, gt, pc, ic, routes, best = line.split("\t")
            rows.append(SceneRecord(sid, float(gt), float(pc), float(ic),
                                    [int(c) for c in routes], [int(c) for c in best]))
        return cls(**{k: float(v) for k, v in kv.items()}, scenes=rows,
                   regressor_names=names.split(",") if names else [])


def _group_by_scene(samples: Sequence[PatchSample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.scene_id, []).append(i)
    return dict(sorted(groups.items()))


def evaluate_samples(regressors, router, samples: Sequence[PatchSample],
                     grid: GridSpec = GridSpec()) -> EvalReport:
    """Route, predict and score patches already cut from their scenes.

    Scene counts are taken from the assembled density map, inside the ROI when
    patches carry one.  ``patch_mae`` is the per-patch routed error;
    ``ideal_patch_mae`` is the oracle-routed per-patch error.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    maps = [[neural.forward_density(r, s.pixels) for r in regressors] for s in samples]
    counts = np.array([[neural.predicted_count(m, s.roi) for m in row]
                       for row, s in zip(maps, samples)])
    gts = np.array([s.gt_count for s in samples])
    routes = route_all(router, samples)
    best = np.array([best_label(c, g)[0] for c, g in zip(counts, gts)], dtype=int)
    idx = np.arange(len(samples))

    records = []
    for sid, members in _group_by_scene(samples).items():
        rois = [samples[i].roi for i in members if samples[i].roi is not None]
        if rois and not any(r.any() for r in rois):
            raise ValueError(f"scene {sid}: region of interest is empty")
        cells = {samples[i].grid_index: i for i in members}
        shape = _frame_shape(samples, members, grid)

        def scene_count(choice):
            tiles = {}
            for g, i in cells.items():
                m = maps[i][choice[i]]
                tiles[g] = m if samples[i].roi is None else m * samples[i].roi
            return float(assemble_density(tiles, grid, shape).sum(dtype=np.float64))

        gt = float(sum(gts[i] for i in members))
        records.append(SceneRecord(sid, gt, scene_count(routes), scene_count(best),
                                   [int(routes[cells[g]]) for g in sorted(cells)],
                                   [int(best[cells[g]]) for g in sorted(cells)]))

    pred = [r.pred_count for r in records]
    ideal = [r.ideal_count for r in records]
    sgt = [r.gt_count for r in records]
    return EvalReport(
        mae=mae(pred, sgt), mse=mse(pred, sgt),
        switch_accuracy=float(np.mean(routes == best)),
        ideal_switch_mae=mae(ideal, sgt),
        patch_mae=mae(counts[idx, routes], gts),
        ideal_patch_mae=mae(counts[idx, best], gts),
        scenes=records, regressor_names=[r.name for r in regressors])


def _frame_shape(samples, members, grid: GridSpec) -> tuple[int, int]:
    """Recover the frame size from the cell crops of one scene."""
    cells = {samples[i].grid_index: samples[i].pixels.shape for i in members}
    missing = [g for g in grid.cells if g not in cells]
    if missing:
        raise KeyError(f"scene {samples[members[0]].scene_id}: missing cells {missing}")
    h = sum(cells[(r, 0)][0] for r in range(grid.rows))
    w = sum(cells[(0, c)][1] for c in range(grid.cols))
    return h, w


def evaluate_model(regressors, router, test_scenes, grid: GridSpec = GridSpec(),
                   kernel: KernelConfig = KernelConfig()) -> EvalReport:
    for s in test_scenes:
        if s.points is None:
            raise ValueError(f"scene {s.id} has no ground truth")
    return evaluate_samples(regressors, router, make_patch_samples(test_scenes, grid, kernel), grid)


def switch_accuracy(switch, samples: Sequence[PatchSample], regressors) -> float:
    """Fraction of patches routed to their count-error argmin regressor."""
    if not samples:
        raise ValueError("empty dataset")
    routes = route_all(switch, samples)
    oracle = route_all(OracleRouter(regressors), samples)
    return float(np.mean(routes == oracle))


def single_regressor_report(reg, samples, grid: GridSpec = GridSpec()) -> EvalReport:
    return evaluate_samples([reg], ConstantRouter(0), samples, grid)


# --- attribute clustering ----------------------------------------------------

def patch_metric(samples: Sequence[PatchSample], metric: str) -> np.ndarray:
    if metric == "count":
        return np.array([s.gt_count for s in samples])
    if metric == "interhead":
        return np.array([patch_mean_interhead_distance(s.points) for s in samples])
    raise ValueError(f"unknown clustering metric {metric!r}")


def cluster_baseline_labels(samples: Sequence[PatchSample], metric: str = "count") -> RoutingLabels:
    """Rank tertiles of a patch attribute mapped to regressors.

    ``count``: low, mid, high go to R1, R2, R3.  ``interhead``: high distance
    goes to R1, low to R2, the middle third to R3.  Equal values keep input
    order, and group sizes differ by at most one.
    """
    if len(samples) < 3:
        raise ValueError("need at least 3 patches for a tertile split")
    values = patch_metric(samples, metric)
    order = np.argsort(values, kind="stable")
    low, mid, high = np.array_split(order, 3)
    labels = np.empty(len(samples), dtype=int)
    if metric == "count":
        labels[low], labels[mid], labels[high] = 0, 1, 2
    else:
        labels[high], labels[low], labels[mid] = 0, 1, 2
    return RoutingLabels(labels, np.full(len(samples), np.nan))


# --- inter-head distance histogram ---------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray  # (num_regressors, num_bins)
    names: list[str]
    means: np.ndarray  # per regressor, over patches with at least two heads

    def to_text(self) -> str:
        """Columns: ``bin_lo``, ``bin_hi``, then one patch count per regressor."""
        lines = ["bin_lo\tbin_hi\t" + "\t".join(self.names)]
        for b in range(len(self.edges) - 1):
            lines.append(f"{self.edges[b]:.6g}\t{self.edges[b + 1]:.6g}\t" +
                         "\t".join(str(int(c)) for c in self.counts[:, b]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Histogram:
        rows = [line.split("\t") for line in text.strip().splitlines()]
        names = rows[0][2:]
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        edges = np.concatenate([body[:, 0], body[-1:, 1]])
        return cls(edges, body[:, 2:].T.astype(int), names, np.full(len(names), np.nan))


def multichotomy_histogram(samples: Sequence[PatchSample], routes, k: int = 10, bins=20,
                           names: Sequence[str] = ("R1", "R2", "R3")) -> Histogram:
    """Per-regressor histogram of patch mean inter-head distance.

    Patches without a defined distance land at 0, in the first bin.
    """
    routes = np.asarray(routes, dtype=int)
    d = np.array([patch_mean_interhead_distance(s.points, k) for s in samples])
    edges = np.histogram_bin_edges(d, bins=bins) if np.ndim(bins) == 0 else np.asarray(bins)
    counts = np.stack([np.histogram(d[routes == j], bins=edges)[0] for j in range(len(names))])
    defined = np.array([len(s.points) >= 2 for s in samples])
    means = np.array([d[(routes == j) & defined].mean() if np.any((routes == j) & defined)
                      else np.nan for j in range(len(names))])
    return Histogram(edges, counts, list(names), means)


def plot_histogram(hist: Histogram, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
    width = np.diff(hist.edges)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bottom = np.zeros(len(centers))
    for name, c in zip(hist.names, hist.counts):
        ax.bar(centers, c, width=width, bottom=bottom, label=name, align="center")
        bottom += c
    ax.set_xlabel("mean inter-head distance (px)")
    ax.set_ylabel("patches")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# --- ablations ---------------------------------------------------------------

def regressor_subset_experiment(subset: Sequence[str], train, val, test, cfg: TrainConfig,
                                mcfg: ModelConfig = ModelConfig(), grid: GridSpec = GridSpec(),
                                log: TrainLog | None = None, coupled: bool = True):
    """Full pipeline restricted to ``subset``; one regressor means no switch.

    Returns the report on ``test`` and the trained model.
    """
    if not subset:
        raise ValueError("regressor subset must not be empty")
    names = [n for n in ("R1", "R2", "R3") if n in set(subset)]
    if len(names) != len(set(subset)):
        raise ValueError(f"unknown regressors in {subset}")
    model = run_pipeline(train, val, cfg, replace(mcfg, regressors=tuple(names)), log=log,
                         coupled=coupled)
    return evaluate_samples(model.regressors, model.router, test, grid), model


def cluster_baseline_experiment(metric: str, train, val, test, cfg: TrainConfig,
                                mcfg: ModelConfig = ModelConfig(), grid: GridSpec = GridSpec(),
                                log: TrainLog | None = None):
    """Pretrain, finetune each regressor on its attribute cluster, train the switch on the clusters."""
    log = log or TrainLog()
    model = build_models(mcfg, cfg.seed)
    model.history += pretrain(model.regressors, train, val, cfg, log)
    labels = cluster_baseline_labels(train, metric)
    router = FixedRouter(train, labels.labels)
    for epoch in range(1, cfg.T_d + 1):
        order = _rng(cfg.seed, 5, epoch).permutation(len(train))
        loss, _ = differential_epoch(model.regressors, train, order, cfg.finetuning(), router=router,
                                     stage=f"cluster_{metric}", epoch=epoch)
        log.write(stage=f"cluster_{metric}", epoch=epoch, train_loss=loss)
    model.labels = labels
    model.history += switch_train(model.regressors, model.switch, train, val, labels, cfg,
                                  cfg.T_c, log, stage=f"cluster_{metric}_switch")
    return evaluate_samples(model.regressors, model.switch, test, grid), model


def pretrained_baselines(model: SwitchCNN, test, grid: GridSpec = GridSpec()) -> dict[str, EvalReport]:
    return {r.name: single_regressor_report(r, test, grid) for r in model.regressors}
