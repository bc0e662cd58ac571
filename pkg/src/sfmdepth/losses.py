"""Training objectives: sparse flow loss, depth consistency loss, schedule.

Both losses are scale-free by construction: the flow loss compares
normalized pixel displacements, and the consistency loss divides squared
differences by squared magnitudes (degree-0 homogeneous). Frame pairs
without usable support raise :class:`PairSkip` so the caller can drop them
from the batch average instead of biasing it with zeros.
"""

from dataclasses import dataclass

import numpy as np

from .errors import PairSkip


@dataclass
class LossWeights:
    """Loss mixing weights with the two-phase consistency schedule."""

    lambda1: float = 20.0
    lambda2: float = 5.0
    lambda2_phase1: float = 0.1
    phase1_epochs: int = 20

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda2_phase1 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.phase1_epochs < 0:
            raise ValueError("phase1_epochs must be non-negative")

    def lambda2_at(self, epoch: int) -> float:
        return self.lambda2_phase1 if epoch <= self.phase1_epochs else self.lambda2


def _values(x):
    return np.asarray(x.values if hasattr(x, "values") else x, dtype=np.float64)


# ---------------------------------------------------------------------------
# sparse flow loss


def _flow_term(F, Fs, M):
    mass = M.sum()
    if not mass > 0:
        raise PairSkip("empty soft mask in flow loss")
    resid = Fs - F
    per_px = np.abs(resid).sum(axis=-1)
    return float((M * per_px).sum() / mass), resid, mass


def sparse_flow_loss_forward(F_jk, F_kj, Fs_jk, Fs_kj, M_j, M_k):
    """Soft-mask-weighted L1 gap between dense and sparse flows, both ways.

    Channel absolute differences are summed per pixel; each direction is
    normalized by its own mask weight total.
    """
    F1, F2 = _values(F_jk), _values(F_kj)
    S1, S2 = _values(Fs_jk), _values(Fs_kj)
    M1, M2 = _values(M_j), _values(M_k)
    t1, r1, m1 = _flow_term(F1, S1, M1)
    t2, r2, m2 = _flow_term(F2, S2, M2)
    cache = {"r1": r1, "m1": m1, "M1": M1, "r2": r2, "m2": m2, "M2": M2}
    return t1 + t2, cache


def sparse_flow_loss_backward(cache, d_loss=1.0):
    """Returns (dF_jk, dF_kj); support is exactly the nonzero-mask pixels."""
    d1 = d_loss * cache["M1"][:, :, None] * (-np.sign(cache["r1"])) / cache["m1"]
    d2 = d_loss * cache["M2"][:, :, None] * (-np.sign(cache["r2"])) / cache["m2"]
    return d1, d2


# ---------------------------------------------------------------------------
# depth consistency loss


def _consistency_term(Z, Zw, W):
    num = float((W * (Z - Zw) ** 2).sum())
    den = float((W * (Z ** 2 + Zw ** 2)).sum())
    return num, den


def depth_consistency_loss_forward(Z_j, Z_k, Zw_kj, Zw_jk, W_jk, W_kj):
    """Symmetric relative squared gap between predictions and warped partners.

    Directions whose denominator vanishes contribute zero; if both vanish
    the pair carries no overlap and is skipped.
    """
    Zj, Zk = _values(Z_j), _values(Z_k)
    Wj = np.asarray(W_jk, dtype=np.float64)
    Wk = np.asarray(W_kj, dtype=np.float64)
    Zkj, Zjk = _values(Zw_kj), _values(Zw_jk)

    n1, d1 = _consistency_term(Zj, Zkj, Wj)
    n2, d2 = _consistency_term(Zk, Zjk, Wk)
    if d1 <= 0 and d2 <= 0:
        raise PairSkip("no valid warp overlap in either direction")
    loss = (n1 / d1 if d1 > 0 else 0.0) + (n2 / d2 if d2 > 0 else 0.0)
    cache = {"Zj": Zj, "Zk": Zk, "Zkj": Zkj, "Zjk": Zjk, "Wj": Wj, "Wk": Wk,
             "n1": n1, "d1": d1, "n2": n2, "d2": d2}
    return loss, cache


def _consistency_grads(Z, Zw, W, num, den, d_loss):
    if den <= 0:
        return np.zeros_like(Z), np.zeros_like(Z)
    diff = Z - Zw
    dZ = d_loss * (2.0 * W * diff * den - num * 2.0 * W * Z) / den ** 2
    dZw = d_loss * (-2.0 * W * diff * den - num * 2.0 * W * Zw) / den ** 2
    return dZ, dZw


def depth_consistency_loss_backward(cache, d_loss=1.0):
    """Returns (dZ_j, dZ_k, dZw_kj, dZw_jk)."""
    dZj, dZkj = _consistency_grads(cache["Zj"], cache["Zkj"], cache["Wj"],
                                   cache["n1"], cache["d1"], d_loss)
    dZk, dZjk = _consistency_grads(cache["Zk"], cache["Zjk"], cache["Wk"],
                                   cache["n2"], cache["d2"], d_loss)
    return dZj, dZk, dZkj, dZjk


# ---------------------------------------------------------------------------
# overall objective


def total_loss(sfl: float, dcl: float, weights: LossWeights, epoch: int) -> float:
    """Weighted sum with the warm-up consistency weight for early epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return weights.lambda1 * sfl + weights.lambda2_at(epoch) * dcl
