"""Speaker adaptation layers that scale the mixture embedding by a speaker bias.

Two variants share one contract, ``(Y [N x T], e [N x 1]) -> [N x T]``:

* scaling adaptation multiplies every frame of ``Y`` by the same speaker vector;
* attention-based scaling adaptation first mean-pools ``Y`` into blocks of
  ``pool_size`` frames, scores each block against the speaker vector, turns the
  scores into a softmax over blocks, and builds a per-block bias
  ``e * w_t (+ e)`` that is upsampled back to the frame rate before scaling.

Neither variant owns learnable parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError, InvalidShapeError


@dataclass(frozen=True)
class AsaConfig:
    pool_size: int = 20
    residual: bool = True
    sqrt_scale: bool = False
    pooling: str = "mean"  # "mean" or "none" (attend over every frame)

    def __post_init__(self):
        if self.pool_size < 1:
            raise InvalidArgumentError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.pooling not in ("mean", "none"):
            raise InvalidArgumentError(f"pooling must be 'mean' or 'none', got {self.pooling!r}")

    @property
    def effective_pool(self) -> int:
        return 1 if self.pooling == "none" else self.pool_size


def _check_pair(y: Tensor, e: Tensor) -> None:
    if y.data.ndim != 2:
        raise InvalidShapeError(f"mixture embedding must be [N x T], got {y.shape}")
    if e.shape != (y.shape[0], 1):
        raise InvalidShapeError(f"speaker embedding must be [{y.shape[0]} x 1], got {e.shape}")


def scaling_adapt(y: Tensor, e: Tensor) -> Tensor:
    """Multiply each frame of ``y`` by the speaker vector ``e``."""
    _check_pair(y, e)
    return ad.mul(y, e)


def asa_attention(u: Tensor, e: Tensor, sqrt_scale: bool = False) -> tuple:
    """Attend the speaker vector over pooled frames.

    Returns ``(w, B)``: the ``[1 x T_m]`` softmax of the similarities ``e^T u_t``
    and the rank-one bias ``B = e w`` (times ``sqrt(N)`` when ``sqrt_scale``).
    """
    _check_pair(u, e)
    d = ad.vecmat(e, u)
    w = ad.softmax(d)
    b = ad.matmul(e, w)
    if sqrt_scale:
        b = ad.scale(b, math.sqrt(u.shape[0]))
    return w, b


def asa_forward(y: Tensor, e: Tensor, cfg: AsaConfig = AsaConfig(), return_weights: bool = False):
    """Attention-based scaling adaptation of ``y`` by ``e``.

    With ``return_weights`` the attention vector is returned alongside the output.
    """
    _check_pair(y, e)
    m = cfg.effective_pool
    t = y.shape[1]
    u = ad.mean_pool1d(y, m) if m > 1 else y
    w, b = asa_attention(u, e, cfg.sqrt_scale)
    o = ad.add(b, e) if cfg.residual else b
    big_e = ad.nearest_upsample1d(o, m, t) if m > 1 else o
    out = ad.mul(y, big_e)
    if return_weights:
        return out, w
    return out


def attention_entropy(w) -> float:
    """Shannon entropy (nats) of a probability vector, with ``0 ln 0 = 0``."""
    p = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).reshape(-1)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise InvalidArgumentError(f"not a probability vector (sum={p.sum():.9f})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def matrix_attention(u: Tensor, q: Tensor) -> tuple:
    """Reference attention between two ``[N x T_m]`` matrices, used as the cost baseline.

    Forms the full ``[T_m x T_m]`` score matrix ``q^T u``, takes a row softmax
    ``A`` and aggregates ``u A^T``. Returns ``(A, output)``.
    """
    if u.shape != q.shape:
        raise InvalidShapeError(f"query and key matrices differ: {q.shape} vs {u.shape}")
    a = ad.softmax(ad.matmul(ad.transpose(q), u))
    return a, ad.matmul(u, ad.transpose(a))


def asa_macs(n: int, t: int, pool: int) -> int:
    """Multiply-adds of the similarity and bias products for one utterance."""
    tm = -(-t // pool)
    return 2 * n * tm


def matrix_attention_macs(n: int, t: int, pool: int, with_aggregation: bool = False) -> int:
    """Multiply-adds of the ``[T_m x T_m]`` score matrix of two-matrix attention.

    ``with_aggregation`` adds the equally sized value product.
    """
    tm = -(-t // pool)
    return (2 if with_aggregation else 1) * n * tm * tm


def build_adapter(kind: str, asa_cfg: Optional[AsaConfig] = None):
    """Return ``fn(y, e) -> (out, weights_or_None)`` for ``kind`` in {SA, ASA, none}."""
    if kind == "SA":
        return lambda y, e: (scaling_adapt(y, e), None)
    if kind == "ASA":
        cfg = asa_cfg or AsaConfig()
        return lambda y, e: asa_forward(y, e, cfg, return_weights=True)
    if kind == "none":
        return lambda y, e: (y, None)
    raise InvalidArgumentError(f"unknown adaptation {kind!r}")
