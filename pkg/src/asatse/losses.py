"""Training objectives: negative SiSDR, speaker cross-entropy and their weighted sum."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import SISDR_EPS
from .errors import InvalidArgumentError

# Evaluation counts per loss path; lets callers verify which terms were computed.
calls: Counter = Counter()

_DB = 10.0 / math.log(10.0)


def sisdr_loss(estimate: Tensor, reference) -> Tensor:
    """Negative SiSDR (dB, unclamped) as a differentiable scalar.

    The stabilizer is ``eps * ||estimate||^2`` (zero-meaned), matching
    :func:`asatse.dsp.sisdr`. Gradients flow to ``estimate`` only.
    """
    calls["sisdr"] += 1
    ref = np.asarray(reference.data if isinstance(reference, Tensor) else reference, dtype=np.float64)
    est_shape = estimate.shape
    x_hat = estimate.data.reshape(-1)
    ref = ref.reshape(-1)
    if x_hat.shape != ref.shape:
        raise InvalidArgumentError(f"length mismatch: {x_hat.shape} vs {ref.shape}")
    xc = ref - ref.mean()
    q = xc @ xc
    if q <= 0:
        raise InvalidArgumentError("reference has zero energy")
    hc = x_hat - x_hat.mean()
    r = hc @ hc
    s = (hc @ xc / q) * xc
    noise = hc - s
    big_s = s @ s
    big_e = noise @ noise + SISDR_EPS * r + np.finfo(float).tiny
    with np.errstate(divide="ignore"):
        value = -_DB * (math.log(big_s) - math.log(big_e)) if big_s > 0 else math.inf

    def _bw(g):
        # d/dhc of ln S is 2s/S; of ln(E + eps r) is 2(noise + eps hc)/E
        dh = -_DB * (2.0 * s / big_s - 2.0 * (noise + SISDR_EPS * hc) / big_e)
        dh = dh - dh.mean()
        return ((g * dh).reshape(est_shape),)

    return Tensor._result(np.array(value), (estimate,), _bw)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` with log-sum-exp stabilization."""
    calls["cross_entropy"] += 1
    z = logits.data.reshape(-1)
    if not 0 <= label < z.size:
        raise InvalidArgumentError(f"label {label} out of range for {z.size} classes")
    zmax = z.max()
    lse = zmax + math.log(np.exp(z - zmax).sum())
    value = lse - z[label]
    shape = logits.shape

    def _bw(g):
        p = np.exp(z - lse)
        p[label] -= 1.0
        return ((g * p).reshape(shape),)

    return Tensor._result(np.array(value), (logits,), _bw)


@dataclass(frozen=True)
class LossReport:
    total: float
    sisdr_term: float
    ce_term: float
    alpha: float
    ce_evaluated: bool = True


def mtl_loss(estimate: Tensor, reference, logits: Optional[Tensor], label: Optional[int],
             alpha: float) -> tuple:
    """Negative SiSDR plus ``alpha`` times speaker cross-entropy.

    Returns ``(total_tensor, LossReport)``. With ``alpha == 0`` the
    cross-entropy is never evaluated and ``logits``/``label`` may be ``None``.
    """
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be non-negative, got {alpha}")
    sis = sisdr_loss(estimate, reference)
    if alpha == 0:
        return sis, LossReport(sis.item(), sis.item(), 0.0, 0.0, ce_evaluated=False)
    if logits is None or label is None:
        raise InvalidArgumentError("alpha > 0 needs speaker logits and a label")
    ce = cross_entropy(logits, label)
    total = ad.add(sis, ad.scale(ce, alpha))
    return total, LossReport(total.item(), sis.item(), ce.item(), float(alpha))
