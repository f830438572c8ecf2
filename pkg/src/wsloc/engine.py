"""Training loop: SGD with momentum, differential learning rates, step schedule.

Everything random in a run derives from ``TrainConfig.seed``: the epoch
shuffle from ``(seed, epoch)`` and each image's augmentation from
``(seed, epoch, batch, image)``. Two runs with the same config therefore
produce bit-identical checkpoints, and a run resumed from a checkpoint
continues exactly as the uninterrupted run would have.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels, metrics, nn
from .augment import AugmentSpec, augment_batch
from .dataset import Dataset, compute_stats, load_dataset
from .errors import ConfigError, InputError, NumericalError
from .inference import forward_eval, predict, prepare_images
from .objective import class_weights, sigmoid, wbce_loss
from .wslnet import HeadSpec, WSLNet, load_network, save_network

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "head_lr", "train_loss", "val_mAP"]


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    # desk-scale schedule; the published schedule is 120 epochs, milestones (60, 100)
    epochs: int = 40
    base_lr: float = 0.1
    milestones: tuple[int, ...] = (20, 32)
    decay: float = 10.0
    backbone_lr_divisor: float = 100.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    # augmentation
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    mask: bool = True
    # 30 px on 480-px frames is 1/16 of the height; the same fraction of a 96-px desk frame
    mask_patch_size: int = 6
    mask_prob: float = 0.5
    # network
    pooling: str = "ESP"
    alpha: float = 0.6
    maps_per_class: int = 4
    stages: tuple[tuple[int, int, int], ...] = nn.DESK_SCALE.stages
    # bookkeeping
    train_split: str = "train"
    val_split: str = "val"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            raise ConfigError(f"milestones {self.milestones} must lie in [1, epochs={self.epochs})")
        for name in ("base_lr", "decay", "backbone_lr_divisor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def augment_spec(self, fill_value) -> AugmentSpec:
        return AugmentSpec(self.flip_prob, self.rotate_prob, self.mask, self.mask_patch_size,
                           self.mask_prob, tuple(float(v) for v in fill_value))

    def build_network(self, num_classes: int) -> WSLNet:
        head = HeadSpec(num_classes, self.maps_per_class, self.pooling, self.alpha)
        return WSLNet(nn.BackboneConfig(self.stages), head, seed=self.seed)


FULL_SCHEDULE = dict(epochs=120, milestones=(60, 100))


def lr_schedule(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """(head lr, backbone lr) for a 0-based epoch index."""
    if not 0 <= epoch < config.epochs:
        raise InputError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for m in config.milestones if epoch >= m)
    head = config.base_lr / config.decay ** passed
    return head, head / config.backbone_lr_divisor


def sgd_step(param: nn.Param, lr: float, momentum: float, weight_decay: float):
    """Momentum SGD with the L2 term folded into the gradient; clears the gradient."""
    if not np.all(np.isfinite(param.grad)):
        raise NumericalError(f"non-finite gradient in parameter {param.name!r}")
    dt = param.value.dtype.type
    g = param.grad + dt(weight_decay) * param.value
    param.momentum_buffer *= dt(momentum)
    param.momentum_buffer += g
    param.value -= dt(lr) * param.momentum_buffer
    param.zero_grad()


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    net: WSLNet | None = None


def _group_by_shape(images):
    groups: dict[tuple, list[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(img.shape, []).append(i)
    return sorted(groups.items())


def train_step(net: WSLNet, images, labels, weights, mean_pixel):
    """Forward/backward one augmented batch; returns the batch loss.

    Frames rotated by 90 degrees differ in shape from the rest, so the batch
    is pushed through per shape group. Each group's loss and gradient are
    scaled by its share of the batch so the total matches a single pass with
    ``N`` = full batch size.
    """
    n = len(images)
    total = 0.0
    for _, idx in _group_by_shape(images):
        x = prepare_images(np.stack([images[i] for i in idx]), mean_pixel)
        _, scores = net.forward(x, "train")
        loss, grad = wbce_loss(scores, labels[idx], weights)
        share = len(idx) / n
        total += loss * share
        net.backward(grad * grad.dtype.type(share))
    return total


def checkpoint_extra(config: TrainConfig, class_names, mean_pixel, weights, epoch_done: int) -> dict:
    # the output location is left out so a checkpoint's bytes do not depend on where it was written
    settings = {k: v for k, v in config.to_dict().items() if k != "out_dir"}
    return {"train": settings, "class_names": list(class_names),
            "mean_pixel": [float(v) for v in mean_pixel], "class_weights": [float(v) for v in weights],
            "epochs_completed": epoch_done}


def _format_row(row):
    return [row["epoch"], repr(row["head_lr"]), repr(row["train_loss"]),
            "nan" if np.isnan(row["val_mAP"]) else repr(row["val_mAP"])]


def train(config: TrainConfig, resume: str | Path | None = None, dataset: Dataset | None = None,
          progress: bool = False) -> TrainResult:
    """Train a network on the image-level labels of ``config.train_split``.

    Writes ``train_log.csv`` and checkpoints into ``config.out_dir``; the
    final checkpoint is ``final.ckpt``.
    """
    kernels.tune_allocator()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_dataset(config.dataset, annotations=False)
    stats = compute_stats(ds, config.train_split)
    weights = class_weights(stats.counts)
    mean_pixel = stats.mean_pixel
    train_images = ds.images(config.train_split)
    train_labels = ds.labels(config.train_split).astype(np.float32)
    has_val = config.val_split in ds.splits and len(ds.splits[config.val_split]) > 0
    if has_val:
        val_images = ds.images(config.val_split)
        val_labels = ds.labels(config.val_split)
    aug = config.augment_spec(mean_pixel)

    start_epoch = 0
    history: list[dict] = []
    if resume is not None:
        net, cfg = load_network(resume)
        start_epoch = int(cfg["epochs_completed"])
        log_path = out / "train_log.csv"
        if log_path.is_file():
            with open(log_path, newline="") as f:
                for row in csv.DictReader(f):
                    if int(row["epoch"]) < start_epoch:
                        history.append({"epoch": int(row["epoch"]), "head_lr": float(row["head_lr"]),
                                        "backbone_lr": float(row["head_lr"]) / config.backbone_lr_divisor,
                                        "train_loss": float(row["train_loss"]),
                                        "val_mAP": float(row["val_mAP"])})
    else:
        net = config.build_network(ds.num_classes)

    n = len(train_images)
    steps = 0
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(LOG_HEADER)
        for row in history:
            wr.writerow(_format_row(row))

    for epoch in range(start_epoch, config.epochs):
        t0 = time.time()
        head_lr, bb_lr = lr_schedule(config, epoch)
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            batch = augment_batch([train_images[i].astype(np.float32) for i in idx], aug,
                                  (config.seed, epoch, b))
            net.zero_grad()
            loss = train_step(net, batch, train_labels[idx], weights, mean_pixel)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in net.head_params():
                sgd_step(p, head_lr, config.momentum, config.weight_decay)
            for p in net.backbone_params():
                sgd_step(p, bb_lr, config.momentum, config.weight_decay)
            losses.append(loss)
            steps += 1
        val_map = float("nan")
        if has_val:
            _, scores = forward_eval(net, val_images, mean_pixel)
            _, val_map, _ = metrics.classification_ap(sigmoid(scores), val_labels, ds.class_names)
        row = {"epoch": epoch, "head_lr": head_lr, "backbone_lr": bb_lr,
               "train_loss": float(np.mean(losses)), "val_mAP": val_map}
        history.append(row)
        with open(log_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(_format_row(row))
        if progress:
            print(f"epoch {epoch:3d} lr {head_lr:.4g} loss {row['train_loss']:.4f} "
                  f"val mAP {val_map:.4f} ({time.time() - t0:.1f}s)", flush=True)
        log.info("epoch %d head_lr %g loss %.5f val_mAP %.4f", epoch, head_lr, row["train_loss"], val_map)
        extra = checkpoint_extra(config, ds.class_names, mean_pixel, weights, epoch + 1)
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
            save_network(out / f"epoch{epoch + 1:03d}.ckpt", net, extra, with_momentum=True)

    final = out / "final.ckpt"
    save_network(final, net, checkpoint_extra(config, ds.class_names, mean_pixel, weights, config.epochs),
                 with_momentum=True)
    return TrainResult(final, history, steps, net)


def evaluate(net: WSLNet, dataset: Dataset, split: str, mean_pixel, tolerance: float | None = None,
             class_names=None) -> metrics.EvalReport:
    """Classification AP, localization AP and distance error on an annotated split.

    ``tolerance`` defaults to the network's global stride.
    """
    if tolerance is None:
        tolerance = net.backbone_config.global_stride
    names = dataset.split_names(split)
    images = dataset.images(split)
    labels = dataset.labels(split)
    preds, _ = predict(net, images, mean_pixel)
    conf = np.array([[p.confidence for p in row] for row in preds])
    peaks = [[p.peak for p in row] for row in preds]
    boxes = [dataset.boxes(nm) for nm in names]
    cls_names = class_names or dataset.class_names
    c_ap, c_map, c_curves = metrics.classification_ap(conf, labels, cls_names)
    l_ap, l_map, l_curves = metrics.localization_ap(conf, peaks, labels, boxes, tolerance, cls_names)
    dist = metrics.mean_distance_errors(peaks, labels, boxes, images.shape[1:3], len(cls_names))
    mean_dist = float(np.nanmean(dist)) if np.any(~np.isnan(dist)) else float("nan")
    return metrics.EvalReport(list(cls_names), c_ap, l_ap, dist, c_map, l_map, mean_dist, c_curves, l_curves)
