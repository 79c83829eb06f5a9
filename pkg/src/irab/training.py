"""Training loops for every compared method, evaluation and ablation grids."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import losses
from .autograd import Tensor, no_grad
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, IrabError, NumericError
from .nn import (ModelBundle, ModelConfig, OptimizerState, adam_step, build_model, ema_update,
                 extract, predict_density, regress, segment)
from .pseudo import (classes_to_labels, generate_pseudo_labels, msst_pseudo_classes, naive_pseudo_labels,
                     pseudo_label_quality)
from .scenes import DatasetSplit, Scene, crop_pyramid, photometric_augment, read_dataset, render_density
from .surrogate import DEFAULT_RATIOS, ThresholdLadder, derive_mask_set, derive_thresholds, quantize_msst

log = logging.getLogger(__name__)

METHODS = ("label-only", "irast", "irast-on-label", "irast-wo-ir", "msst", "l2r", "uda", "mt", "ict")
SEG_METHODS = ("irast", "irast-on-label", "irast-wo-ir", "msst")
UNLABELED_METHODS = ("irast", "irast-wo-ir", "msst", "l2r", "uda", "mt", "ict")


@dataclass
class TrainConfig:
    method: str = "irast"
    epochs: int = 60
    steps_per_epoch: int = 100
    lr: float = 1e-3
    lr_period: int = 20
    t_p: float = 0.9
    ratios: tuple = DEFAULT_RATIOS
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    sigma: float = 1.5
    val_fraction: float = 0.25
    eval_period: int = 1
    ema_alpha: float = 0.99
    aug_strength: float = 1.0
    l2r_levels: int = 3
    l2r_ratio: float = 0.75
    mixup_beta: tuple = (1.0, 1.0)
    reduction: str = "sum"
    track_pseudo_quality: bool = True
    model: Optional[dict] = None
    dataset_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.mixup_beta = tuple(float(b) for b in self.mixup_beta)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.5 < self.t_p < 1:
            raise ConfigError(f"t_p must lie in (0.5, 1), got {self.t_p}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.lr_period < 1 or self.eval_period < 1:
            raise ConfigError("epochs, steps_per_epoch, lr_period and eval_period must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0 <= self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in [0, 1]")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        losses.LossWeights(self.lambda1, self.lambda2)

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda1, self.lambda2)

    @property
    def uses_unlabeled(self) -> bool:
        return self.method in UNLABELED_METHODS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["mixup_beta"] = list(self.mixup_beta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def model_config_for(cfg: TrainConfig) -> ModelConfig:
    """Network for a method: binary heads for the IRAST family, one
    multi-class head for MSST, no segmentation heads otherwise."""
    heads = len(cfg.ratios) if cfg.method in SEG_METHODS else 0
    multiclass = cfg.method == "msst"
    if cfg.model is None:
        return ModelConfig.desk(num_seg_heads=heads, multiclass=multiclass)
    d = dict(cfg.model)
    d.update(num_seg_heads=heads, multiclass=multiclass)
    return ModelConfig.from_dict(d)


def lr_at(lr0: float, epoch: int, period: int) -> float:
    """Learning rate halved every ``period`` epochs (epoch counted from 0)."""
    return lr0 * 2.0 ** (-(epoch // period))


@dataclass
class RunState:
    seed: int
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    best_val_mae: float = float("inf")
    rng_labeled: np.random.Generator = None
    rng_unlabeled: np.random.Generator = None
    rng_aug: np.random.Generator = None
    rng_mixup: np.random.Generator = None

    def __post_init__(self):
        self.rng_labeled = np.random.default_rng([self.seed, 11])
        self.rng_unlabeled = np.random.default_rng([self.seed, 12])
        self.rng_aug = np.random.default_rng([self.seed, 13])
        self.rng_mixup = np.random.default_rng([self.seed, 14])


def schedule_step(state: RunState, labeled: Sequence, unlabeled: Sequence = ()):
    """One labeled and (if available) one unlabeled index, drawn uniformly with replacement.

    Labeled and unlabeled indices come from independent streams, so the
    labeled sequence does not depend on whether an unlabeled pool exists.
    """
    if not len(labeled):
        raise DataError("labeled pool is empty")
    li = int(state.rng_labeled.integers(len(labeled)))
    ui = int(state.rng_unlabeled.integers(len(unlabeled))) if len(unlabeled) else None
    return li, ui


@dataclass
class _Labeled:
    image: Tensor
    density: np.ndarray
    masks: np.ndarray
    classes: np.ndarray


@dataclass
class TrainResult:
    model: ModelBundle
    best_model: ModelBundle
    history: list
    ladder: Optional[ThresholdLadder]
    state: RunState
    test: Optional[dict] = None


def _image_tensor(scene: Scene) -> Tensor:
    return Tensor(scene.image[None, None])


def evaluate(m: ModelBundle, scenes: Sequence[Scene], params: Optional[dict] = None,
             batch: int = 50) -> dict:
    """Count errors with C_hat = sum of the predicted density.

    MSE is the root of the mean squared count error, as is customary in
    crowd counting.
    """
    if not len(scenes):
        raise DataError("cannot evaluate on an empty scene list")
    preds = []
    with no_grad():
        for i in range(0, len(scenes), batch):
            chunk = scenes[i:i + batch]
            shapes = {s.image.shape for s in chunk}
            if len(shapes) == 1:
                x = Tensor(np.stack([s.image for s in chunk])[:, None])
                d = predict_density(m, x, params).data
                preds.extend(d.sum(axis=(1, 2, 3)).tolist())
            else:
                preds.extend(float(predict_density(m, _image_tensor(s), params).data.sum()) for s in chunk)
    truth = np.array([s.count for s in scenes], dtype=np.float64)
    pred = np.array(preds)
    err = pred - truth
    return {"mae": float(np.mean(np.abs(err))), "mse": float(np.sqrt(np.mean(err ** 2))),
            "counts": pred.tolist(), "truth": truth.tolist()}


def _finite_or_none(x: float):
    return x if np.isfinite(x) else None


def _staircase_ok(labels: np.ndarray) -> bool:
    ones = labels == 1
    zeros = labels == 0
    prefix = np.logical_and.accumulate(ones, axis=0)
    suffix = np.logical_and.accumulate(zeros[::-1], axis=0)[::-1]
    return bool(np.all(ones == prefix) and np.all(zeros == suffix))


class _Trainer:
    def __init__(self, cfg: TrainConfig, data: DatasetSplit, run_dir: Optional[Path]):
        self.cfg = cfg
        self.run_dir = run_dir
        self.mcfg = model_config_for(cfg)
        f = self.mcfg.downsample_factor
        n_val = int(round(cfg.val_fraction * len(data.labeled)))
        if len(data.labeled) - n_val < 1:
            raise DataError("not enough labeled scenes for training after carving validation")
        self.val = list(data.labeled[:n_val])
        train_scenes = list(data.labeled[n_val:])
        densities = [render_density(s, cfg.sigma, f) for s in train_scenes]
        self.ladder = None
        if cfg.method in SEG_METHODS:
            self.ladder = derive_thresholds(densities, cfg.ratios)
        self.labeled = []
        for s, d in zip(train_scenes, densities):
            masks = derive_mask_set(d, self.ladder) if self.ladder else np.zeros((0,) + d.shape)
            classes = quantize_msst(d, self.ladder) if self.ladder else np.zeros(d.shape, int)
            self.labeled.append(_Labeled(_image_tensor(s), d, masks, classes))
        self.unlabeled = list(data.unlabeled) if cfg.uses_unlabeled else []
        if cfg.uses_unlabeled and not self.unlabeled:
            raise DataError(f"method {cfg.method} needs unlabeled scenes")
        self._truth_cache: dict = {}
        self.test = list(data.test)

        self.model = build_model(self.mcfg, cfg.seed)
        if cfg.method == "mt":
            self.model.attach_teacher()
        self.opt = OptimizerState(lr=cfg.lr)
        self.state = RunState(cfg.seed, lr=cfg.lr)
        self.best = self.model.clone()
        self.history: list = []

    # -- per-method unlabeled terms ------------------------------------------

    def _pseudo_truth(self, ui: int) -> np.ndarray:
        if ui not in self._truth_cache:
            d = render_density(self.unlabeled[ui], self.cfg.sigma, self.mcfg.downsample_factor)
            self._truth_cache[ui] = derive_mask_set(d, self.ladder)
        return self._truth_cache[ui]

    def _unlabeled_term(self, ui: int, stats: dict) -> Tensor:
        cfg, m, w = self.cfg, self.model, self.cfg.weights
        scene = self.unlabeled[ui]
        img = _image_tensor(scene)
        if cfg.method in ("irast", "irast-wo-ir"):
            probs = segment(m, extract(m, img))
            fields = np.stack([p.data[0, 1] for p in probs])
            rule = generate_pseudo_labels if cfg.method == "irast" else naive_pseudo_labels
            labels = rule(fields, cfg.t_p)
            self._pl_stats(labels, ui, stats)
            stats["last_fields"] = fields
            return losses.unlabeled_loss(probs, labels, w, cfg.reduction)
        if cfg.method == "msst":
            (q,) = segment(m, extract(m, img))
            classes = msst_pseudo_classes(q.data[0], cfg.t_p)
            self._pl_stats(classes_to_labels(classes, len(self.ladder)), ui, stats)
            if w.lambda2 == 0:
                return Tensor(0.0)
            return ag.scale(losses.seg_ce_loss(q, classes, cfg.reduction), w.lambda2)
        aug_seed = int(self.state.rng_aug.integers(2**31 - 1))
        if cfg.method == "l2r":
            crops = crop_pyramid(scene, cfg.l2r_levels, cfg.l2r_ratio, self.mcfg.downsample_factor, aug_seed)
            counts = [ag.sum(predict_density(m, _image_tensor(c))) for c in reversed(crops)]
            return ag.scale(losses.rank_loss(counts), w.lambda2)
        aug = photometric_augment(scene.image, aug_seed, cfg.aug_strength)
        if cfg.method == "uda":
            with no_grad():
                clean = predict_density(m, img)
            return ag.scale(losses.uda_loss(predict_density(m, Tensor(aug[None, None])), clean), w.lambda2)
        if cfg.method == "mt":
            with no_grad():
                teacher = predict_density(m, Tensor(aug[None, None]), m.teacher)
            return ag.scale(losses.mt_loss(predict_density(m, img), teacher), w.lambda2)
        if cfg.method == "ict":
            lam = losses.sample_mixup(self.state.rng_mixup, *cfg.mixup_beta)
            with no_grad():
                d_aug = predict_density(m, Tensor(aug[None, None]))
                d_clean = predict_density(m, img)
            mixed = lam * aug + (1.0 - lam) * scene.image
            return ag.scale(losses.ict_loss(predict_density(m, Tensor(mixed[None, None])), d_aug, d_clean, lam),
                            w.lambda2)
        raise ConfigError(f"method {cfg.method} has no unlabeled term")

    def _pl_stats(self, labels, ui: int, stats: dict) -> None:
        stats["pl_coverage"].append(labels.count() / labels.labels.size)
        if self.cfg.track_pseudo_quality:
            q = pseudo_label_quality(labels, self._pseudo_truth(ui))
            if q["emitted"]:
                stats["pl_precision"].append(q["precision"])
        stats["last_labels"] = labels

    # -- main loop -----------------------------------------------------------

    def step(self, stats: dict) -> float:
        cfg, m, w = self.cfg, self.model, self.cfg.weights
        li, ui = schedule_step(self.state, self.labeled, self.unlabeled)
        lab = self.labeled[li]
        m.zero_grad()
        feats = extract(m, lab.image)
        dens = regress(m, feats)
        if cfg.method in ("irast", "irast-on-label", "irast-wo-ir"):
            loss = losses.labeled_loss(dens, lab.density[None, None], segment(m, feats), lab.masks, w, cfg.reduction)
        elif cfg.method == "msst":
            (q,) = segment(m, feats)
            loss = losses.multiclass_labeled_loss(dens, lab.density[None, None], q, lab.classes, w, cfg.reduction)
        else:
            loss = losses.mse_loss(dens, lab.density[None, None], cfg.reduction)
        if ui is not None:
            loss = ag.add(loss, self._unlabeled_term(ui, stats))
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {self.state.epoch} step {self.state.step} "
                               f"(method {cfg.method}, labeled #{li}, unlabeled #{ui})")
        ag.backward(loss)
        adam_step(self.opt, m.params, m.grads())
        if cfg.method == "mt":
            ema_update(m.teacher, m.params, cfg.ema_alpha)
        self.state.step += 1
        return value

    def _check_invariants(self, stats: dict) -> None:
        labels = stats.get("last_labels")
        if labels is None or self.cfg.method not in ("irast", "irast-wo-ir"):
            return
        if not _staircase_ok(labels.labels) and self.cfg.method == "irast":
            raise IrabError(f"staircase violated at step {self.state.step}")
        if self.cfg.method == "irast":
            naive = naive_pseudo_labels(stats["last_fields"], self.cfg.t_p)
            if not labels.is_subset_of(naive):
                raise IrabError(f"subset property violated at step {self.state.step}")

    def run(self) -> TrainResult:
        cfg = self.cfg
        metrics_path = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.run_dir / "metrics.jsonl"
            metrics_path.write_text("", encoding="utf-8")
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            self.state.epoch = epoch
            self.state.lr = self.opt.lr = lr_at(cfg.lr, epoch, cfg.lr_period)
            if epoch % cfg.eval_period == 0:
                stats = {"loss": [], "pl_coverage": [], "pl_precision": []}
            for _ in range(cfg.steps_per_epoch):
                stats["loss"].append(self.step(stats))
            if (epoch + 1) % cfg.eval_period == 0 or epoch + 1 == cfg.epochs:
                self._check_invariants(stats)
                self._eval(stats, metrics_path)
        self.model.check_finite()
        test = None
        if self.test:
            test = evaluate(self.best, self.test)
            rec = {"kind": "test", "method": cfg.method, "seed": cfg.seed, "mae": test["mae"],
                   "mse": test["mse"], "n_test": len(self.test), "n_labeled_train": len(self.labeled),
                   "n_val": len(self.val), "n_unlabeled": len(self.unlabeled),
                   "best_val_mae": _finite_or_none(self.state.best_val_mae)}
            self._emit(rec, metrics_path)
        if self.run_dir is not None:
            with open(self.run_dir / "timing.jsonl", "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"wall_time_s": time.perf_counter() - t0, "steps": self.state.step}) + "\n")
        return TrainResult(self.model, self.best, self.history, self.ladder, self.state, test)

    def _emit(self, rec: dict, path: Optional[Path]) -> None:
        self.history.append(rec)
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _eval(self, stats: dict, path: Optional[Path]) -> None:
        st = self.state
        rec = {"kind": "eval", "epoch": st.epoch + 1, "step": st.step, "lr": st.lr,
               "train_loss": float(np.mean(stats["loss"]))}
        if self.val:
            ev = evaluate(self.model, self.val)
            rec.update(val_mae=ev["mae"], val_mse=ev["mse"])
            improved = ev["mae"] < st.best_val_mae
        else:
            improved = True
        if improved:
            st.best_val_mae = rec.get("val_mae", float("inf"))
            self.best = self.model.clone()
            if self.run_dir is not None:
                save_checkpoint(self.best, self.opt, self.run_dir / "best.ckpt")
        if stats["pl_coverage"]:
            rec["pl_coverage"] = float(np.mean(stats["pl_coverage"]))
        if stats["pl_precision"]:
            rec["pl_precision"] = float(np.mean(stats["pl_precision"]))
        log.info("epoch %d step %d lr %.2e loss %.4f val_mae %s", rec["epoch"], rec["step"], rec["lr"],
                 rec["train_loss"], rec.get("val_mae"))
        self._emit(rec, path)


def train(cfg: TrainConfig, data: Optional[DatasetSplit] = None, run_dir=None,
          audit: Optional[list] = None) -> TrainResult:
    """Train one method; returns final and best-validation models plus history.

    When ``data`` is omitted it is read from ``cfg.dataset_dir``; methods that
    ignore unlabeled data never open unlabeled files.
    """
    if data is None:
        if not cfg.dataset_dir:
            raise DataError("no dataset given and cfg.dataset_dir unset")
        roles = ("labeled", "unlabeled", "test") if cfg.uses_unlabeled else ("labeled", "test")
        data = read_dataset(cfg.dataset_dir, roles, audit)
    if not data.labeled:
        raise DataError("dataset has no labeled scenes")
    return _Trainer(cfg, data, Path(run_dir) if run_dir is not None else None).run()


def run_ablation(grid: dict, base: TrainConfig, data: DatasetSplit, manifest_sum: Optional[str] = None,
                 run_root=None) -> list:
    """Train and test one run per grid cell.

    ``grid`` has exactly one key: ``t_p`` (values), ``num_tasks`` (surrogate
    task counts, taken along 0, 0.5N, 0.7N, 0.8N, 0.9N) or ``n_labeled``
    (prefixes of the labeled split). Each row carries the resolved config.
    """
    from .surrogate import TASK_SEQUENCE

    if len(grid) != 1:
        raise ConfigError("ablation grid must vary exactly one factor")
    (key, values), = grid.items()
    if not values:
        raise ConfigError("ablation grid is empty")
    rows = []
    for v in values:
        cell_data = data
        if key == "t_p":
            cfg = replace(base, t_p=float(v))
        elif key == "num_tasks":
            if not 1 <= int(v) <= len(TASK_SEQUENCE):
                raise ConfigError(f"num_tasks must lie in 1..{len(TASK_SEQUENCE)}")
            cfg = replace(base, ratios=TASK_SEQUENCE[:int(v)])
        elif key == "n_labeled":
            if int(v) > len(data.labeled):
                raise ConfigError(f"only {len(data.labeled)} labeled scenes available")
            cfg = base
            cell_data = DatasetSplit(data.labeled[:int(v)], data.unlabeled, data.test, data.spec)
        else:
            raise ConfigError(f"unknown ablation factor {key!r}")
        run_dir = None if run_root is None else Path(run_root) / f"{key}={v}" / f"{cfg.method}-{cfg.seed}"
        res = train(cfg, cell_data, run_dir)
        test = res.test or evaluate(res.best_model, cell_data.test)
        rows.append({"factor": key, "value": v, "method": cfg.method, "seed": cfg.seed,
                     "mae": test["mae"], "mse": test["mse"], "n_labeled": len(cell_data.labeled),
                     "manifest_sha256": manifest_sum, "config": cfg.to_dict()})
    return rows
