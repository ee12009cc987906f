"""Experiment drivers: the training-loss by evaluation-metric grid and the
comparison of trained relighters against the diffuse photometric-stereo
baseline on held-out scenes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evaluation, metrics, synth
from .dataset import FrameStore
from .learner.train import fixed_pairs, train
from .lighting import standard_rig

__all__ = ["StudyResult", "synthetic_stores", "loss_grid", "BaselineComparison", "compare_to_baseline"]


def synthetic_stores(n_train, n_val, light_set=None, seed=0, resolution=128, pool=None):
    """Render ``n_train + n_val`` oracle scenes with consecutive seeds."""
    light_set = light_set if light_set is not None else standard_rig()
    seeds = range(seed, seed + n_train + n_val)
    mapper = pool.map if pool is not None else map
    scenes = list(mapper(lambda s: synth.build_scene(s, resolution=resolution), seeds))
    store = FrameStore.from_scenes(scenes, light_set)
    return store.split(n_val)


@dataclass
class StudyResult:
    losses: list
    metrics: list
    grid: np.ndarray  # (len(losses), len(metrics))
    histories: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def best_rows(self, metric, rel_tol=0.0):
        """Training losses whose score under ``metric`` is within ``rel_tol``
        (relative) of the column minimum."""
        j = self.metrics.index(metric)
        col = self.grid[:, j]
        best = col.min()
        return [self.losses[i] for i in range(len(self.losses)) if col[i] <= best * (1 + rel_tol)]


def loss_grid(config, train_store, val_store, losses=metrics.METRICS, eval_metrics=metrics.METRICS,
              n_pairs=32, pair_seed=1234, log=None):
    """Train one model per training loss and score each under every metric."""
    pairs = fixed_pairs(val_store, n_pairs, seed=pair_seed)
    grid = np.zeros((len(losses), len(eval_metrics)))
    res = StudyResult(list(losses), list(eval_metrics), grid)
    for i, loss in enumerate(losses):
        cfg = config.with_loss(loss)
        if log is not None:
            log(f"training with {loss}")
        model, hist = train(cfg, train_store, val_store, log=log)
        preds = evaluation.predict_pairs(model, val_store, pairs)
        for j, m in enumerate(eval_metrics):
            grid[i, j] = np.mean([
                metrics.evaluate(m, p, val_store.scenes[si].images[kd])
                for p, (si, _, kd) in zip(preds, pairs)
            ])
        res.histories[loss] = hist
        res.models[loss] = model
        if log is not None:
            log(f"{loss}: " + " ".join(f"{m}={v:.5f}" for m, v in zip(eval_metrics, grid[i])))
    return res


@dataclass
class BaselineComparison:
    baseline: float
    known: float
    unknown: float
    histories: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    @property
    def improvement(self):
        """Relative reduction of the known-illumination model against the baseline."""
        return 1.0 - self.known / self.baseline

    @property
    def unknown_ordering_ok(self):
        between = self.known <= self.unknown <= self.baseline
        close = abs(self.unknown - self.known) <= 0.1 * self.known
        return between or close


def compare_to_baseline(config, train_store, val_store, n_pairs=64, pair_seed=1234,
                        metric="dssim", log=None):
    """Score the diffuse baseline and models trained with and without the
    source light on the same held-out pairs."""
    pairs = fixed_pairs(val_store, n_pairs, seed=pair_seed)
    base = evaluation.score_pairs(evaluation.pms_baselines(val_store), val_store, pairs, metric)
    out = {}
    histories, models = {}, {}
    for label, known in (("known", True), ("unknown", False)):
        d = config.to_dict()
        d["known_source_illumination"] = known
        cfg = type(config).from_dict(d)
        if log is not None:
            log(f"training {label}-illumination model")
        model, hist = train(cfg, train_store, val_store, log=log)
        out[label] = evaluation.score_pairs(model, val_store, pairs, metric)
        histories[label], models[label] = hist, model
        if log is not None:
            log(f"{label}: {metric} {out[label]:.5f} (baseline {base:.5f})")
    return BaselineComparison(base, out["known"], out["unknown"], histories, models)
