"""Mask projections: logistic curve, continuous Heaviside, logistic rounding.

Every function accepts either a numpy array (plain evaluation) or an
:class:`~chipnet.ndgrad.Tensor` (differentiable, analytic local gradient).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad
from .ndgrad import Tensor

GAMMA_CAP = 1e4
DEFAULT_BETA_ROUND = 20.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable for large |x| and exactly 0.5 at x = 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic(psi, beta: float, psi0: float = 0.0):
    """z_tilde = 1 / (1 + exp(-beta * (psi - psi0)))."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if isinstance(psi, Tensor):
        v = _sigmoid(beta * (psi.data.astype(np.float64) - psi0))
        return ndgrad.unary(psi, v, beta * v * (1.0 - v), "logistic")
    return _sigmoid(beta * (np.asarray(psi, dtype=np.float64) - psi0))


def heaviside(z_tilde, gamma: float):
    """Continuous Heaviside approximation z = 1 - exp(-gamma z~) + z~ exp(-gamma).

    Fixes 0 and 1 for every gamma, is the identity at gamma = 0 and tends to a
    step function as gamma grows. ``gamma`` is clipped at ``GAMMA_CAP``.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    g = min(float(gamma), GAMMA_CAP)
    tail = np.exp(-g)
    if isinstance(z_tilde, Tensor):
        zt = z_tilde.data.astype(np.float64)
        head = np.exp(-g * zt)
        return ndgrad.unary(z_tilde, 1.0 - head + zt * tail, g * head + tail, "heaviside")
    zt = np.asarray(z_tilde, dtype=np.float64)
    return 1.0 - np.exp(-g * zt) + zt * tail


def crispness_loss(z_tilde, z):
    """Squared L2 distance between the two projections; zero only on crisp masks."""
    if isinstance(z_tilde, Tensor) or isinstance(z, Tensor):
        d = ndgrad.sub(z_tilde, z)
        return ndgrad.tsum(ndgrad.mul(d, d))
    zt, zz = np.asarray(z_tilde, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if zt.shape != zz.shape:
        raise ValueError(f"crispness_loss operands differ in shape: {zt.shape} vs {zz.shape}")
    return float(np.sum((zt - zz) ** 2))


def logistic_round(z, beta_round: float = DEFAULT_BETA_ROUND):
    """Sharpen masks around 0.5 before they enter a budget function."""
    if beta_round <= 0:
        raise ValueError(f"beta_round must be > 0, got {beta_round}")
    return logistic(z, beta_round, psi0=0.5)


@dataclass(frozen=True)
class ContinuationState:
    """Epoch-indexed growth of beta (additive) and gamma (doubling)."""

    epoch: int = 0
    beta_init: float = 1.0
    beta_step: float = 0.02
    beta_every: int = 1
    gamma_init: float = 2.0
    gamma_double_every: int = 2

    @property
    def beta(self) -> float:
        return self.beta_init + self.beta_step * (self.epoch // self.beta_every)

    @property
    def gamma(self) -> float:
        return min(self.gamma_init * 2.0 ** (self.epoch // self.gamma_double_every), GAMMA_CAP)

    @classmethod
    def preset(cls, name: str) -> "ContinuationState":
        if name not in SCHEDULE_PRESETS:
            raise ValueError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}")
        return cls(**SCHEDULE_PRESETS[name])


# "default": +0.02 per epoch, gamma doubling every 2 epochs.
# "grid": the alternate grid-search parameterization, +0.1 every 5 epochs.
SCHEDULE_PRESETS = {
    "default": dict(beta_init=1.0, beta_step=0.02, beta_every=1, gamma_init=2.0, gamma_double_every=2),
    "grid": dict(beta_init=1.0, beta_step=0.1, beta_every=5, gamma_init=2.0, gamma_double_every=2),
}


def schedule_step(state: ContinuationState) -> ContinuationState:
    return dataclasses.replace(state, epoch=state.epoch + 1)


class MaskSet:
    """Per-channel mask parameters ``psi`` grouped by layer, with cached projections."""

    def __init__(self, psi: np.ndarray, layer_sizes):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        psi = np.asarray(psi, dtype=np.float32).reshape(-1)
        if psi.size != sum(self.layer_sizes):
            raise ValueError(f"psi has {psi.size} entries but layers hold {sum(self.layer_sizes)}")
        self.psi = Tensor(psi, requires_grad=True, name="psi")
        self.z_tilde: np.ndarray | None = None
        self.z: np.ndarray | None = None
        self.z_bar: np.ndarray | None = None

    @classmethod
    def initialize(cls, layer_sizes, rng: np.random.Generator, low: float = 2.5, high: float = 3.5) -> "MaskSet":
        total = sum(int(s) for s in layer_sizes)
        return cls(rng.uniform(low, high, size=total), layer_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.layer_sizes)]).astype(int)

    def __len__(self) -> int:
        return sum(self.layer_sizes)

    def split(self, flat):
        """Cut a flat per-channel vector (array or Tensor) into per-layer pieces."""
        off = self.offsets
        return [flat[off[j]:off[j + 1]] for j in range(len(self.layer_sizes))]

    def project(
        self,
        state: ContinuationState,
        psi0: float = 0.0,
        beta_round: float = DEFAULT_BETA_ROUND,
        use_heaviside: bool = True,
        use_rounding: bool = True,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Differentiable (z_tilde, z, z_bar) for the current continuation state."""
        zt = logistic(self.psi, state.beta, psi0)
        z = heaviside(zt, state.gamma) if use_heaviside else zt
        zb = logistic_round(z, beta_round) if use_rounding else z
        self.z_tilde, self.z, self.z_bar = zt.data.copy(), z.data.copy(), zb.data.copy()
        return zt, z, zb

    def values(self, state: ContinuationState, psi0: float = 0.0, use_heaviside: bool = True) -> np.ndarray:
        """Non-differentiable z for the given state."""
        zt = logistic(self.psi.data, state.beta, psi0)
        return heaviside(zt, state.gamma) if use_heaviside else zt


def projection_curves(path: str | Path | None = None, psi_range: float = 6.0, samples: int = 241) -> list[dict]:
    """Sample the projection curves (logistic, Heaviside, composed, crispness) as rows.

    Written as CSV when ``path`` is given. Columns: panel, beta, gamma, x,
    z_tilde, z, crispness.
    """
    rows = []
    psi = np.linspace(-psi_range, psi_range, samples)
    unit = np.linspace(0.0, 1.0, samples)
    for beta in (0.1, 0.5, 1.0, 2.0, 5.0):
        for x, zt in zip(psi, logistic(psi, beta)):
            rows.append(dict(panel="logistic", beta=beta, gamma="", x=x, z_tilde=zt, z="", crispness=""))
    for gamma in (1, 2, 8, 32, 256):
        for x, z in zip(unit, heaviside(unit, gamma)):
            rows.append(dict(panel="heaviside", beta="", gamma=gamma, x=x, z_tilde=x, z=z, crispness=""))
    for panel, pairs in (("composed", [(2.0, 4.0)]),
                         ("crispness", [(1.0, 4), (1.1, 16), (1.1, 64), (2.0, 64), (2.0, 128), (1.0, 128)])):
        for beta, gamma in pairs:
            zt = logistic(psi, beta)
            z = heaviside(zt, gamma)
            for x, a, b in zip(psi, zt, z):
                rows.append(dict(panel=panel, beta=beta, gamma=gamma, x=x, z_tilde=a, z=b, crispness=(a - b) ** 2))
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
