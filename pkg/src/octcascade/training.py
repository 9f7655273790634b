"""cGAN and TISN training loops with plateau-based early stopping and LR halving."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from octcascade import dataprep, losses, nn_core
from octcascade.dataio import split_train_validation, write_csv

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "cgan": {"learning_rate": 2e-3, "max_epochs": 100, "batch_size": 4, "lr_halving_patience": None},
    "tisn": {"learning_rate": 1e-3, "max_epochs": 150, "batch_size": 2, "lr_halving_patience": 5},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "cgan"
    learning_rate: float | None = None
    max_epochs: int | None = None
    batch_size: int | None = None
    early_stop_patience: int = 10
    lr_halving_patience: int | None = -1
    lr_factor: float = 2.0
    min_delta: float = 1e-6
    validation_fraction: float = 0.1
    seed: int = 0
    lam: float = 100.0
    alpha: float = 10.0
    # probability of feeding the replicated image instead of w during cGAN training
    mask_channel_replicate_prob: float = 0.0
    augment_copies: int = 2
    # probability that an augmented gold TISN copy gets background leaked into its pre-segmentation
    preseg_corruption_prob: float = 0.0
    preseg_jitter_px: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        for k, v in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, k) is None or (k == "lr_halving_patience" and getattr(self, k) == -1):
                setattr(self, k, v)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lr_halving_patience is not None and self.lr_halving_patience < 1:
            raise ValueError("lr_halving_patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        for name in ("mask_channel_replicate_prob", "preseg_corruption_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.preseg_jitter_px < 0:
            raise ValueError("preseg_jitter_px must be >= 0")
        losses.CGanLossConfig(self.lam, self.alpha)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --- stopping rule ----------------------------------------------------------

class PlateauSchedule:
    """Early stopping plus optional LR reduction, driven by validation loss.

    An epoch improves when its loss beats the best so far by more than
    ``min_delta``. Training stops once ``early_stop_patience`` consecutive
    epochs fail to improve; the LR is divided by ``factor`` each time
    ``lr_patience`` consecutive epochs fail to improve (the counter restarts
    after every reduction).
    """

    def __init__(self, lr: float, early_stop_patience: int = 10, lr_patience: int | None = None,
                 factor: float = 2.0, min_delta: float = 1e-6):
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.lr_patience = lr_patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = float("inf")
        self.stale = 0
        self.lr_stale = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
            self.lr_stale = 0
        else:
            self.stale += 1
            self.lr_stale += 1
        if self.lr_patience is not None and self.lr_stale >= self.lr_patience:
            self.lr /= self.factor
            self.lr_stale = 0
        return self.stale >= self.early_stop_patience


@dataclass
class ScheduleTrace:
    epochs_run: int
    stop_reason: str
    lrs: list
    halving_epochs: list
    best_epoch: int


def best_epoch(val_losses) -> int:
    """1-based epoch of the minimum validation loss, first one on ties."""
    return int(np.argmin(np.asarray(val_losses, dtype=np.float64))) + 1


def simulate_schedule(val_losses, max_epochs: int, lr: float, early_stop_patience: int = 10,
                      lr_patience: int | None = None, factor: float = 2.0,
                      min_delta: float = 1e-6) -> ScheduleTrace:
    """Replay the stopping/LR rule on a fixed validation-loss sequence."""
    sched = PlateauSchedule(lr, early_stop_patience, lr_patience, factor, min_delta)
    lrs, halvings, seen = [], [], []
    reason = "max_epochs"
    for epoch in range(1, max_epochs + 1):
        lrs.append(sched.lr)
        loss = float(val_losses[epoch - 1])
        seen.append(loss)
        before = sched.lr
        stop = sched.step(loss)
        if sched.lr != before:
            halvings.append(epoch)
        if stop:
            reason = "early_stop"
            break
    return ScheduleTrace(len(seen), reason, lrs, halvings, best_epoch(seen))


# --- logs -------------------------------------------------------------------

@dataclass
class TrainLog:
    stage: str
    records: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    def add(self, **rec) -> None:
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    @property
    def val_losses(self) -> list:
        return [r["validation_loss"] for r in self.records]

    def comparable(self) -> list:
        """Records without wall-clock times (for reproducibility checks)."""
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def save(self, out_dir, stem: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.records:
            write_csv(out_dir / f"{stem}.csv", self.records, list(self.records[0].keys()))
        (out_dir / f"{stem}.json").write_text(json.dumps({
            "stage": self.stage, "stop_reason": self.stop_reason, "best_epoch": self.best_epoch,
            "records": self.records}, indent=2))


# --- datasets ---------------------------------------------------------------

@dataclass
class CganDataset:
    """Gold training triples per tile: image, gold pre-segmentation and weight mask (all [0, 1])."""

    images: np.ndarray
    presegs: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_targets(cls, t: dataprep.TargetSet) -> "CganDataset":
        return cls(np.stack(t.images).astype(np.float32), np.stack(t.presegs).astype(np.float32),
                   np.stack(t.weights).astype(np.float32))

    def subset(self, idx) -> "CganDataset":
        idx = np.asarray(idx, dtype=int)
        return CganDataset(self.images[idx], self.presegs[idx], self.weights[idx])

    def with_flips(self) -> "CganDataset":
        return CganDataset(np.concatenate([self.images, self.images[..., ::-1]]),
                           np.concatenate([self.presegs, self.presegs[..., ::-1]]),
                           np.concatenate([self.weights, self.weights[..., ::-1]]))


@dataclass
class TisnDataset:
    """Two-channel TISN samples: image, second channel, binary label, annotation rows.

    ``mode`` records what the second channel holds: ``gold`` pre-segmentation,
    ``generator`` prediction, or ``replicate`` (a copy of the image, for the
    direct-segmentation baseline).
    """

    images: np.ndarray
    second: np.ndarray
    labels: np.ndarray
    rows: np.ndarray
    mode: str = "gold"

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "TisnDataset":
        idx = np.asarray(idx, dtype=int)
        return TisnDataset(self.images[idx], self.second[idx], self.labels[idx], self.rows[idx], self.mode)


def build_tisn_training_inputs(images, rows, gold_presegs=None, generator=None,
                               mode: str | None = None) -> TisnDataset:
    """Pair each tile with its second TISN channel.

    Exactly one source is used: ``gold_presegs``, a trained ``generator``, or
    ``mode="replicate"`` (image copied into both channels).
    """
    images = np.stack([np.asarray(i, dtype=np.float32) for i in images])
    rows = np.stack([np.asarray(r, dtype=np.int64) for r in rows])
    if len(rows) != len(images):
        raise ValueError("need one annotation per tile")
    if mode is None:
        mode = "generator" if generator is not None else "gold"
    if mode == "gold":
        if gold_presegs is None or len(gold_presegs) != len(images):
            raise ValueError("gold mode needs one pre-segmentation per tile")
        second = np.stack([np.asarray(p, dtype=np.float32) for p in gold_presegs])
    elif mode == "generator":
        if generator is None:
            raise ValueError("generator mode needs a generator")
        second = nn_core.forward_with_test_time_input(generator, images).astype(np.float32)
    elif mode == "replicate":
        second = images.copy()
    else:
        raise ValueError(f"unknown TISN input mode {mode!r}")
    labels = np.stack([dataprep.make_binary_label(r, images.shape[1:]) for r in rows])
    return TisnDataset(images, second, labels, rows, mode)


def augment_tisn_dataset(ds: TisnDataset, policy: dataprep.AugmentationPolicy, copies: int,
                         corruption_prob: float = 0.0, jitter_px: int = 0) -> TisnDataset:
    """Originals plus ``copies`` random augmentations of every sample.

    Gold second channels are rebuilt from the geometrically warped (but
    photometrically untouched) image and the re-sampled annotation; with
    probability ``corruption_prob`` they then get background leaked back in
    (see ``dataprep.corrupt_preseg``).
    """
    if copies <= 0:
        return ds
    rng = np.random.default_rng(policy.seed)
    imgs, secs, labs, rws = [ds.images], [ds.second], [ds.labels], [ds.rows]
    for _ in range(copies):
        for i in range(len(ds)):
            if ds.mode == "gold":
                img, warped, r = dataprep.augment(ds.images[i], {"clean": ds.images[i]}, policy, rng,
                                                  annotation=ds.rows[i])
                sec = dataprep.make_gold_preseg(warped["clean"], r)
                if corruption_prob > 0 and rng.random() < corruption_prob:
                    sec = dataprep.corrupt_preseg(warped["clean"], sec, r, rng, jitter_px=jitter_px)
            elif ds.mode == "generator":
                img, warped, r = dataprep.augment(ds.images[i], {"second": ds.second[i]}, policy, rng,
                                                  annotation=ds.rows[i])
                sec = warped["second"]
            else:
                img, _, r = dataprep.augment(ds.images[i], {}, policy, rng, annotation=ds.rows[i])
                sec = img
            imgs.append(img[None].astype(np.float32))
            secs.append(np.asarray(sec, dtype=np.float32)[None])
            labs.append(dataprep.make_binary_label(r, img.shape)[None])
            rws.append(r[None])
    return TisnDataset(np.concatenate(imgs), np.concatenate(secs), np.concatenate(labs),
                       np.concatenate(rws), ds.mode)


def _split_indices(n: int, cfg: TrainConfig):
    train, val = split_train_validation(list(range(n)), cfg.validation_fraction, cfg.seed)
    return train, val


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _check_finite(value: torch.Tensor, what: str, epoch: int) -> None:
    if not torch.isfinite(value):
        raise TrainingError(f"{what} became non-finite at epoch {epoch}")


# --- cGAN -------------------------------------------------------------------

def _cgan_arrays(ds: CganDataset):
    x_img = nn_core.to_generator_range(torch.from_numpy(ds.images))[:, None]
    x_w = nn_core.to_generator_range(torch.from_numpy(ds.weights))[:, None]
    y_t = nn_core.to_generator_range(torch.from_numpy(ds.presegs))[:, None]
    w = torch.from_numpy(ds.weights)[:, None]
    return x_img, x_w, y_t, w


def cgan_validation_loss(generator, ds: CganDataset, alpha: float) -> float:
    """Weighted L1 of the generator (dropout off) on validation triples."""
    x_img, x_w, y_t, w = _cgan_arrays(ds)
    was = generator.training
    generator.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, len(ds), 8):
            y_f = generator(torch.cat([x_img[i:i + 8], x_w[i:i + 8]], dim=1))
            total += float(losses.weighted_l1_loss(y_t[i:i + 8], y_f, w[i:i + 8], alpha)) * len(y_f)
    generator.train(was)
    return total / len(ds)


def train_cgan(dataset: CganDataset, cfg: TrainConfig, generator, discriminator):
    """Alternating discriminator / generator Adam updates on the weighted objective.

    The training part is flip-augmented; validation is the weighted L1 term
    on held-out tiles. Returns the generator restored to its best epoch and
    the training log.
    """
    if len(dataset) == 0:
        raise TrainingError("empty cGAN dataset")
    if cfg.stage != "cgan":
        raise ValueError("train_cgan needs a cgan-stage TrainConfig")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tr_idx, val_idx = _split_indices(len(dataset), cfg)
    train = dataset.subset(tr_idx).with_flips()
    val = dataset.subset(val_idx)
    x_img, x_w, y_t, w = _cgan_arrays(train)

    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.learning_rate)
    sched = PlateauSchedule(cfg.learning_rate, cfg.early_stop_patience, None, cfg.lr_factor, cfg.min_delta)
    tlog = TrainLog("cgan")
    best_state, best_loss = None, float("inf")
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        generator.train()
        discriminator.train()
        sums = {"loss_D": 0.0, "loss_G_adv": 0.0, "weighted_l1": 0.0, "objective": 0.0}
        nb = 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            idx = torch.as_tensor(idx)
            second = x_w[idx]
            if cfg.mask_channel_replicate_prob > 0:
                swap = torch.as_tensor(rng.random(len(idx)) < cfg.mask_channel_replicate_prob)
                second = torch.where(swap[:, None, None, None], x_img[idx], second)
            x = torch.cat([x_img[idx], second], dim=1)
            real = y_t[idx]
            fake = generator(x)

            opt_d.zero_grad()
            loss_d, _ = losses.adversarial_loss(discriminator(torch.cat([x, real], 1)),
                                                discriminator(torch.cat([x, fake.detach()], 1)))
            _check_finite(loss_d, "discriminator loss", epoch)
            loss_d.backward()
            opt_d.step()

            opt_g.zero_grad()
            _, loss_g_adv = losses.adversarial_loss(None, discriminator(torch.cat([x, fake], 1)))
            wl1 = losses.weighted_l1_loss(real, fake, w[idx], cfg.alpha)
            obj = losses.generator_objective(loss_g_adv, wl1, cfg.lam)
            _check_finite(obj, "generator objective", epoch)
            obj.backward()
            opt_g.step()

            sums["loss_D"] += loss_d.item()
            sums["loss_G_adv"] += loss_g_adv.item()
            sums["weighted_l1"] += wl1.item()
            sums["objective"] += obj.item()
            nb += 1
        val_loss = cgan_validation_loss(generator, val, cfg.alpha)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(generator.state_dict())
            tlog.best_epoch = epoch
        tlog.add(epoch=epoch, **{k: v / nb for k, v in sums.items()}, validation_loss=val_loss,
                 lr=cfg.learning_rate, wall_time=time.perf_counter() - t0)
        log.info("cgan epoch %d: objective %.4f val %.5f", epoch, sums["objective"] / nb, val_loss)
        if sched.step(val_loss):
            tlog.stop_reason = "early_stop"
            break
    else:
        tlog.stop_reason = "max_epochs"
    generator.load_state_dict(best_state)
    generator.eval()
    return generator, tlog


# --- TISN -------------------------------------------------------------------

def _tisn_tensors(ds: TisnDataset):
    x = torch.from_numpy(np.stack([ds.images, ds.second], axis=1).astype(np.float32))
    lab = torch.from_numpy(ds.labels.astype(np.float32))
    y = torch.stack([lab, 1.0 - lab], dim=1)
    return x, y


def tisn_validation_loss(net, ds: TisnDataset) -> float:
    x, y = _tisn_tensors(ds)
    was = net.training
    net.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, len(ds), 8):
            total += float(losses.mse_loss(net(x[i:i + 8]), y[i:i + 8])) * len(x[i:i + 8])
    net.train(was)
    return total / len(ds)


def train_tisn(dataset: TisnDataset, cfg: TrainConfig, net,
               policy: dataprep.AugmentationPolicy | None = None):
    """MSE training of the segmentation network with LR halving and early stopping.

    The training split is expanded with ``cfg.augment_copies`` draws of
    ``policy`` (full augmentation by default); validation tiles stay untouched.
    """
    if len(dataset) == 0:
        raise TrainingError("empty TISN dataset")
    if cfg.stage != "tisn":
        raise ValueError("train_tisn needs a tisn-stage TrainConfig")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tr_idx, val_idx = _split_indices(len(dataset), cfg)
    policy = policy or dataprep.AugmentationPolicy("tisn-full", seed=cfg.seed)
    train = augment_tisn_dataset(dataset.subset(tr_idx), policy, cfg.augment_copies,
                                 cfg.preseg_corruption_prob, cfg.preseg_jitter_px)
    val = dataset.subset(val_idx)
    x, y = _tisn_tensors(train)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = PlateauSchedule(cfg.learning_rate, cfg.early_stop_patience, cfg.lr_halving_patience,
                            cfg.lr_factor, cfg.min_delta)
    tlog = TrainLog("tisn")
    best_state, best_loss = None, float("inf")
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        total, nb = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            idx = torch.as_tensor(idx)
            opt.zero_grad()
            loss = losses.mse_loss(net(x[idx]), y[idx])
            _check_finite(loss, "MSE loss", epoch)
            loss.backward()
            opt.step()
            total += loss.item()
            nb += 1
        val_loss = tisn_validation_loss(net, val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}")
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(net.state_dict())
            tlog.best_epoch = epoch
        tlog.add(epoch=epoch, mse=total / nb, validation_loss=val_loss, lr=lr,
                 wall_time=time.perf_counter() - t0)
        log.info("tisn epoch %d: mse %.5f val %.5f lr %.2e", epoch, total / nb, val_loss, lr)
        if sched.step(val_loss):
            tlog.stop_reason = "early_stop"
            break
    else:
        tlog.stop_reason = "max_epochs"
    net.load_state_dict(best_state)
    net.eval()
    return net, tlog
