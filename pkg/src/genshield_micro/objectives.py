"""Training losses: autoregressive cross-entropy and rectified flow matching.

Both losses reduce by mean (per supervised token / per element) so the
0.25 : 1 weighting between them is independent of sequence length and
grid size. Timesteps are drawn uniformly and remapped through the
configured shift toward t = 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError

TIMESTEP_SHIFT = 4.0
LOSS_LAMBDA = 0.25


@dataclass(frozen=True)
class FlowState:
    z_t: np.ndarray
    t: float
    z0: np.ndarray


def shift_time(u, shift: float = TIMESTEP_SHIFT):
    """Map uniform u in [0,1] to t = s*u / (1 + (s-1)*u); monotone, fixes 0 and 1."""
    u = np.asarray(u, dtype=np.float64)
    out = shift * u / (1.0 + (shift - 1.0) * u)
    return float(out) if out.ndim == 0 else out


def sample_timestep(rng: np.random.Generator, shift: float = TIMESTEP_SHIFT) -> float:
    return shift_time(rng.random(), shift)


def interpolate(x1: np.ndarray, z0: np.ndarray, t: float) -> FlowState:
    """Linear noise interpolation z_t = t*x1 + (1-t)*z0."""
    if x1.shape != z0.shape:
        raise ShapeError("interpolate", x1.shape, z0.shape)
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"timestep {t} outside [0, 1]")
    return FlowState(z_t=t * x1 + (1.0 - t) * z0, t=t, z0=z0)


def fm_loss(velocity_pred: nn.Tensor, x1: np.ndarray, z0: np.ndarray) -> nn.Tensor:
    """Mean squared error of the predicted velocity against x1 - z0."""
    if x1.shape != z0.shape or velocity_pred.shape != x1.shape:
        raise ShapeError("fm_loss", velocity_pred.shape, x1.shape, z0.shape)
    target = x1 - z0
    return nn.mean_(nn.square(nn.sub(velocity_pred, target)))


def ar_loss(text_logits: nn.Tensor, targets: np.ndarray, ar_mask: np.ndarray) -> nn.Tensor:
    """Mean negative log-likelihood over supervised positions.

    ``text_logits[k]`` scores the token predicted at supervised slot k and
    ``targets[k]`` is the true token there; ``ar_mask`` selects which slots
    contribute. Masked-off slots get an exactly-zero gradient.
    """
    targets = np.asarray(targets)
    ar_mask = np.asarray(ar_mask, dtype=bool)
    n, v = text_logits.shape[-2], text_logits.shape[-1]
    if targets.shape != (n,) or ar_mask.shape != (n,):
        raise ShapeError("ar_loss", text_logits.shape, targets.shape, ar_mask.shape)
    n_sup = int(ar_mask.sum())
    if n_sup == 0:
        raise ConfigError("ar_loss: no supervised position (sample misassembled)")
    onehot = np.zeros((n, v), dtype=text_logits.dtype)
    onehot[np.arange(n), targets] = 1.0
    onehot[~ar_mask] = 0.0
    picked = nn.sum_(nn.mul(nn.log_softmax(text_logits), onehot))
    return nn.mul(picked, -1.0 / n_sup)


def combined_loss(fm, ar=None, lam: float = LOSS_LAMBDA):
    """Total loss fm + lam*ar; just fm when no AR term is present."""
    if lam < 0:
        raise ConfigError(f"lambda {lam} must be >= 0")
    if ar is None:
        return fm
    if isinstance(fm, nn.Tensor) or isinstance(ar, nn.Tensor):
        return nn.add(fm, nn.mul(ar, lam))
    return fm + lam * ar
