"""Patient-level folds, temporal split, LR plateau schedule and the training loop."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import os
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .anchors import AnchorAssignments, match_anchors
from .detector import NetworkConfig, RetinaNet3D, save_checkpoint
from .geometry import Category
from .losses import LossConfig, total_loss
from .records import SIDES, BreastRecord, StudyRecord

log = logging.getLogger(__name__)

CATEGORY_ORDER = [c for c in Category]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_epsilon: float = 1e-4
    batch_size: int = 8
    epochs: int = 45
    include_benign: bool = True
    match_threshold: float = 0.2
    seed: int = 0
    # stop after this many optimizer steps (None: run all epochs)
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number (breasts come in pairs)")


# ---------------------------------------------------------------- folds


def patient_categories(studies: Sequence[StudyRecord]) -> dict[str, Counter]:
    out: dict[str, Counter] = {}
    for s in studies:
        c = out.setdefault(s.patient_id, Counter())
        c.update(a.category for a in s.annotations)
    return out


def make_folds(studies: Sequence[StudyRecord], k: int = 10, seed: int = 0) -> dict[str, int]:
    """Assign every patient to one of ``k`` folds, balancing lesion categories.

    Patients are placed greedily, rarest category first, each into the fold
    that currently holds the fewest lesions of that patient's categories
    (ties: fewest patients, then a seeded fold priority).
    """
    per_patient = patient_categories(studies)
    patients = sorted(per_patient)
    if k < 1 or k > len(patients):
        raise ValueError(f"cannot make {k} folds from {len(patients)} patients")
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    fold_priority = rng.permutation(k)

    totals = Counter()
    for c in per_patient.values():
        totals.update(c)
    rarity = sorted(CATEGORY_ORDER, key=lambda c: (totals[c], CATEGORY_ORDER.index(c)))

    def group(pid):
        cats = per_patient[pid]
        if not cats:
            return len(rarity)
        return min(rarity.index(c) for c in cats)

    # stable sort keeps the seeded shuffle inside each group
    patients.sort(key=lambda pid: (group(pid), -sum(per_patient[pid].values())))

    counts = np.zeros((k, len(CATEGORY_ORDER)), dtype=int)
    n_patients = np.zeros(k, dtype=int)
    assignment = {}
    for pid in patients:
        cats = per_patient[pid]
        cols = [CATEGORY_ORDER.index(c) for c in cats.elements()]
        key = [
            (int(counts[f, cols].sum()) if cols else 0, int(n_patients[f]), int(fold_priority[f]))
            for f in range(k)
        ]
        f = min(range(k), key=lambda i: key[i])
        assignment[pid] = f
        n_patients[f] += 1
        for c, n in cats.items():
            counts[f, CATEGORY_ORDER.index(c)] += n
    return assignment


def fold_category_counts(studies: Sequence[StudyRecord], assignment: dict[str, int], k: int) -> np.ndarray:
    counts = np.zeros((k, len(CATEGORY_ORDER)), dtype=int)
    for s in studies:
        for a in s.annotations:
            counts[assignment[s.patient_id], CATEGORY_ORDER.index(a.category)] += 1
    return counts


def split_fold(studies: Sequence[StudyRecord], assignment: dict[str, int], fold: int):
    """(train, test) studies for one cross-testing fold."""
    train = [s for s in studies if assignment[s.patient_id] != fold]
    test = [s for s in studies if assignment[s.patient_id] == fold]
    return train, test


def make_temporal_split(studies: Sequence[StudyRecord], cutoff_date: dt.date | str):
    """Studies up to ``cutoff_date`` train, later ones test; a patient with any
    study after the cutoff goes to test entirely."""
    if isinstance(cutoff_date, str):
        cutoff_date = dt.date.fromisoformat(cutoff_date)
    late = {s.patient_id for s in studies if s.date > cutoff_date}
    train = [s for s in studies if s.patient_id not in late]
    test = [s for s in studies if s.patient_id in late]
    if not train or not test:
        warnings.warn(
            f"temporal split at {cutoff_date} gives {len(train)} train and {len(test)} test studies",
            stacklevel=2,
        )
    return train, test


# ---------------------------------------------------------------- schedule


@dataclass
class PlateauSchedule:
    """Multiply the LR by ``factor`` once the epoch loss has failed to beat the
    best value by more than ``epsilon`` (relative) for ``patience`` epochs."""

    lr: float
    factor: float = 0.1
    patience: int = 3
    epsilon: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> float:
        if not math.isfinite(self.best) or loss < self.best * (1 - self.epsilon):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def lr_trace(losses: Sequence[float], lr: float, factor=0.1, patience=3, epsilon=1e-4) -> list[float]:
    """LR in effect after each epoch, as a pure function of the loss sequence."""
    sched = PlateauSchedule(lr, factor, patience, epsilon)
    return [sched.step(l) for l in losses]


# ---------------------------------------------------------------- training loop


def breast_targets(breast: BreastRecord, include_benign: bool) -> np.ndarray:
    cats = None if include_benign else {Category.MALIGNANT}
    return breast.boxes_in_crop(cats)


def make_batches(studies: Sequence[StudyRecord], batch_size: int, rng: np.random.Generator) -> list[list[BreastRecord]]:
    """Shuffle studies and pack both breasts of batch_size // 2 studies per batch."""
    per = batch_size // 2
    order = rng.permutation(len(studies))
    return [
        [studies[i].breasts[side] for i in order[j:j + per] for side in SIDES]
        for j in range(0, len(order), per)
    ]


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("CADE_NUM_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class TrainResult:
    model: RetinaNet3D
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


class _Loader:
    def __init__(self, root, dtype):
        self.root = root
        self.dtype = dtype

    def __call__(self, breasts: Sequence[BreastRecord]) -> torch.Tensor:
        return torch.as_tensor(np.stack([b.load(self.root) for b in breasts]), dtype=self.dtype)


def build_model(config: NetworkConfig | None = None, seed: int = 0, dtype=torch.float32) -> RetinaNet3D:
    torch.manual_seed(seed)
    return RetinaNet3D(config or NetworkConfig()).to(dtype)


def fit(train_set: Sequence[StudyRecord], val_set: Sequence[StudyRecord] | None, net: RetinaNet3D,
        config: TrainConfig | None = None, loss_config: LossConfig | None = None, root=None,
        checkpoint_path=None, log_path=None, step_log_path=None,
        on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``net`` in place with Adam and the plateau schedule."""
    config = config or TrainConfig()
    loss_config = loss_config or LossConfig()
    dtype = next(net.parameters()).dtype
    load = _Loader(root, dtype)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sched = PlateauSchedule(config.learning_rate, config.plateau_factor, config.plateau_patience,
                            config.plateau_epsilon)
    assign_cache: dict[str, AnchorAssignments] = {}

    def assignments(breasts, spatial):
        anchors = net.anchors_for(spatial)
        out = []
        for b in breasts:
            if b.breast_id not in assign_cache:
                assign_cache[b.breast_id] = match_anchors(
                    anchors, breast_targets(b, config.include_benign), config.match_threshold
                )
            out.append(assign_cache[b.breast_id])
        return out

    def batch_loss(x, breasts):
        out = net(x)
        spatial = (x.shape[4], x.shape[2], x.shape[3])
        return total_loss(out.flat_logits(), out.flat_deltas(), assignments(breasts, spatial), loss_config)

    result = TrainResult(net)
    step = 0
    workers = num_workers()
    pool = ThreadPoolExecutor(max_workers=1) if workers > 1 else None
    log_fh = open(log_path, "a") if log_path else None
    step_fh = open(step_log_path, "a") if step_log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            net.train()
            batches = make_batches(train_set, config.batch_size, rng)
            pending = pool.submit(load, batches[0]) if pool and batches else None
            losses = []
            for bi, breasts in enumerate(batches):
                if pool:
                    x = pending.result()
                    if bi + 1 < len(batches):
                        pending = pool.submit(load, batches[bi + 1])
                else:
                    x = load(breasts)
                opt.zero_grad(set_to_none=True)
                parts = batch_loss(x, breasts)
                if not torch.isfinite(parts.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step + 1}: focal={float(parts.focal.detach())} "
                        f"regression={float(parts.regression.detach())}"
                    )
                parts.total.backward()
                opt.step()
                step += 1
                rec = {"step": step, "focal": float(parts.focal.detach()), "regression": float(parts.regression.detach()),
                       "total": float(parts.total.detach()), "lr": opt.param_groups[0]["lr"]}
                result.steps.append(rec)
                if step_fh:
                    step_fh.write(json.dumps(rec) + "\n")
                losses.append(float(parts.total.detach()))
                if config.max_steps is not None and step >= config.max_steps:
                    break

            train_loss = float(np.mean(losses)) if losses else float("nan")
            val_loss = evaluate_loss(net, val_set, config, loss_config, root) if val_set else None
            lr = sched.step(train_loss)
            for g in opt.param_groups:
                g["lr"] = lr
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
            result.epochs.append(rec)
            log.info("epoch %d train_loss %.5f val_loss %s lr %.2e", epoch, train_loss, val_loss, lr)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
            if config.max_steps is not None and step >= config.max_steps:
                break
    finally:
        if pool:
            pool.shutdown()
        for fh in (log_fh, step_fh):
            if fh:
                fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, {"train": asdict(config), "epochs": result.epochs})
    return result


@torch.no_grad()
def evaluate_loss(net: RetinaNet3D, studies: Sequence[StudyRecord], config: TrainConfig,
                  loss_config: LossConfig, root=None) -> float:
    """Mean batch loss with the network in inference mode."""
    was = net.training
    net.eval()
    load = _Loader(root, next(net.parameters()).dtype)
    losses = []
    try:
        for breasts in make_batches(studies, config.batch_size, np.random.default_rng(0)):
            x = load(breasts)
            out = net(x)
            anchors = net.anchors_for((x.shape[4], x.shape[2], x.shape[3]))
            assigns = [match_anchors(anchors, breast_targets(b, config.include_benign), config.match_threshold)
                       for b in breasts]
            losses.append(float(total_loss(out.flat_logits(), out.flat_deltas(), assigns, loss_config).total))
    finally:
        net.train(was)
    return float(np.mean(losses)) if losses else float("nan")


@torch.no_grad()
def detect(net: RetinaNet3D, studies: Sequence[StudyRecord], root=None, score_threshold: float = 0.05,
           nms_threshold: float = 0.5, max_detections: int = 100, batch_size: int = 2):
    """Detections in original-volume coordinates for every breast of ``studies``."""
    load = _Loader(root, next(net.parameters()).dtype)
    breasts = [s.breasts[side] for s in studies for side in SIDES]
    dets = []
    for i in range(0, len(breasts), batch_size):
        chunk = breasts[i:i + batch_size]
        dets += net.predict(load(chunk), [b.breast_id for b in chunk], [b.crop_origin for b in chunk],
                            score_threshold, nms_threshold, max_detections)
    return dets
