"""Objectives for the cGAN and the tissue-interface segmentation network.

All reductions are means over pixels (and batch), so ``lambda`` and ``alpha``
keep the same meaning across tile sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass
class CGanLossConfig:
    lam: float = 100.0
    alpha: float = 10.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_loss(d_real, d_fake, eps: float = EPS):
    """Discriminator loss and non-saturating generator loss from patch scores.

    ``loss_D = -mean[log D(x, y_t) + log(1 - D(x, y_f))]`` and
    ``loss_G = -mean[log D(x, y_f)]``. Scores must lie in [0, 1]; they are
    clamped to ``[eps, 1 - eps]`` before the logs. Either argument may be
    ``None`` when only one of the two losses is wanted.
    """
    loss_d = loss_g = None
    for name, s in (("d_real", d_real), ("d_fake", d_fake)):
        if s is None:
            continue
        s = _t(s)
        with torch.no_grad():
            if torch.isnan(s).any() or (s < 0).any() or (s > 1).any():
                raise ValueError(f"{name} scores must lie in [0, 1]")
    if d_fake is not None:
        f = _t(d_fake).clamp(eps, 1 - eps)
        loss_g = -torch.log(f).mean()
        if d_real is not None:
            r = _t(d_real).clamp(eps, 1 - eps)
            loss_d = -(torch.log(r).mean() + torch.log(1 - f).mean())
    return loss_d, loss_g


def discriminator_loss(d_real, d_fake):
    return adversarial_loss(d_real, d_fake)[0]


def generator_adversarial_loss(d_fake):
    return adversarial_loss(None, d_fake)[1]


def l1_loss(y_t, y_f):
    y_t, y_f = _t(y_t), _t(y_f)
    _same_shape(y_t, y_f, "l1_loss")
    return (y_t - y_f).abs().mean()


def weighted_l1_loss(y_t, y_f, w, alpha: float = 10.0):
    """``mean[(alpha * w + (1 - w)) * |y_t - y_f|]`` with a binary weight mask ``w``."""
    y_t, y_f, w = _t(y_t), _t(y_f), _t(w)
    _same_shape(y_t, y_f, "weighted_l1_loss")
    _same_shape(y_t, w, "weighted_l1_loss (weight mask)")
    if not torch.all((w == 0) | (w == 1)):
        raise ValueError("weight mask must be binary")
    w = w.to(y_f.dtype)
    return ((alpha * w + (1 - w)) * (y_t - y_f).abs()).mean()


def generator_objective(loss_g_adv, weighted_l1, lam: float = 100.0):
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    return loss_g_adv + lam * weighted_l1


def mse_loss(pred, target):
    pred, target = _t(pred), _t(target)
    _same_shape(pred, target, "mse_loss")
    return ((pred - target.to(pred.dtype)) ** 2).mean()
