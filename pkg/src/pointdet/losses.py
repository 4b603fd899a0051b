"""Scalar training losses and their analytic gradients.

Everything here is plain float64 numpy with hand-derived gradients; there
is deliberately no autodiff. Center classification uses a focal
cross-entropy over the heatmap, size regression a smooth-L1 on log-size
residuals weighted per object by a crowdedness factor, and offsets a plain
smooth-L1. Each loss returns both its value and d(loss)/d(prediction) so
the detector's backward pass can chain them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NoPositives

PRED_CLAMP = 1e-7  # keep predicted probabilities away from {0, 1} for the logs


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0    # focal exponent on the prediction
    delta: float = 4.0    # penalty-reduction exponent on soft negatives
    a_balance: float = 1.0  # negative-term coefficient: 1 at stride 4, 1/16 at stride 1
    lam: float = 0.1      # weight of the center loss in the combined objective

    def __post_init__(self):
        if min(self.gamma, self.delta, self.a_balance, self.lam) <= 0:
            raise ValueError("all loss coefficients must be positive")

    @classmethod
    def for_stride(cls, stride: int, **kw) -> "LossConfig":
        # Full-resolution output has 16x the negatives of the stride-4 grid.
        kw.setdefault("a_balance", 1.0 / 16.0 if stride == 1 else 1.0)
        return cls(**kw)


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray  # d(value)/d(prediction), same shape as the prediction


def focal_center_loss(pred: np.ndarray, target: np.ndarray,
                      pos_mask: np.ndarray, cfg: LossConfig = LossConfig()) -> LossValue:
    """Focal cross-entropy over every heatmap pixel, normalized by M.

    Positives (pos_mask) contribute (1-q)^gamma * log q; all other pixels
    contribute A * (1-target)^delta * q^gamma * log(1-q), which fades the
    penalty of negatives lying inside a neighbor's Gaussian mask. The loss
    is the negated sum divided by the number of positives. Predictions are
    clamped to [PRED_CLAMP, 1-PRED_CLAMP]; the gradient is zero where the
    clamp is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    pos = np.asarray(pos_mask, dtype=bool)
    m = int(pos.sum())
    if m == 0:
        raise NoPositives("focal loss needs at least one positive cell")
    q = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
    tgt = np.asarray(target, dtype=np.float64)

    log_q = np.log(q)
    log_1q = np.log1p(-q)
    terms = np.empty_like(q)
    grad = np.empty_like(q)

    g, d, a = cfg.gamma, cfg.delta, cfg.a_balance
    one_minus_q = 1.0 - q
    # positives: (1-q)^g * log q
    terms[pos] = one_minus_q[pos] ** g * log_q[pos]
    grad[pos] = (-g * one_minus_q[pos] ** (g - 1.0) * log_q[pos]
                 + one_minus_q[pos] ** g / q[pos])
    # negatives: A (1-target)^d q^g log(1-q)
    neg = ~pos
    w = a * (1.0 - tgt[neg]) ** d
    terms[neg] = w * q[neg] ** g * log_1q[neg]
    grad[neg] = w * (g * q[neg] ** (g - 1.0) * log_1q[neg]
                     - q[neg] ** g / one_minus_q[neg])

    value = -terms.sum() / m
    gradient = np.where(inside, -grad / m, 0.0)
    return LossValue(float(value), gradient)


def smooth_l1(x):
    """Elementwise smooth L1: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside.

    Returns (value, derivative); the derivative at the |x| = 1 kinks takes
    the outer branch (sign(x)).
    """
    x = np.asarray(x, dtype=np.float64)
    inner = np.abs(x) < 1.0
    value = np.where(inner, 0.5 * x * x, np.abs(x) - 0.5)
    deriv = np.where(inner, x, np.sign(x))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def crowdedness_size_loss(pred: np.ndarray, target: np.ndarray,
                          pos_mask: np.ndarray, alphas=1.0) -> LossValue:
    """Alpha-weighted smooth L1 on log-size residuals at positive cells.

    ``alphas`` is a scalar or a vector aligned with the positive cells in
    row-major order (see raster.values_at_positives). With alphas == 1 this
    reduces to the unweighted mean smooth-L1 loss. Gradient is zero off the
    positive cells.
    """
    pred = np.asarray(pred, dtype=np.float64)
    pos = np.asarray(pos_mask, dtype=bool)
    m = int(pos.sum())
    if m == 0:
        raise NoPositives("size loss needs at least one positive cell")
    alphas = np.broadcast_to(np.asarray(alphas, dtype=np.float64), (m,))
    resid = pred[pos] - np.asarray(target, dtype=np.float64)[pos]
    v, dv = smooth_l1(resid)
    value = float(np.sum(alphas * v) / m)
    gradient = np.zeros_like(pred)
    gradient[pos] = alphas * dv / m
    return LossValue(value, gradient)


def offset_loss(pred: np.ndarray, target: np.ndarray,
                pos_mask: np.ndarray) -> LossValue:
    """Mean smooth L1 over both offset channels at positive cells."""
    pred = np.asarray(pred, dtype=np.float64)
    pos = np.asarray(pos_mask, dtype=bool)
    m = int(pos.sum())
    if m == 0:
        raise NoPositives("offset loss needs at least one positive cell")
    tgt = np.asarray(target, dtype=np.float64)
    resid = pred[:, pos] - tgt[:, pos]      # (2, M)
    v, dv = smooth_l1(resid)
    value = float(v.sum() / (2 * m))
    gradient = np.zeros_like(pred)
    gradient[:, pos] = dv / (2 * m)
    return LossValue(value, gradient)


def combined_loss(l_center: float, l_size: float, l_offset: float | None,
                  cfg: LossConfig = LossConfig()) -> float:
    """Total objective: lam * center + size + offset (offset absent at stride 1)."""
    total = cfg.lam * l_center + l_size
    if l_offset is not None:
        total += l_offset
    return float(total)


@dataclass
class FDReport:
    max_rel_err: float
    checked: int
    excluded: int


def finite_difference_check(loss_fn, x: np.ndarray, epsilon: float = 1e-5,
                            exclude: np.ndarray | None = None,
                            sample: int | None = None,
                            rng: np.random.Generator | None = None) -> FDReport:
    """Compare an analytic gradient against central differences.

    ``loss_fn(x)`` must return (value, gradient). ``exclude`` marks entries
    to skip (known kinks/clamp boundaries); they are counted, not checked.
    ``sample`` limits the check to that many randomly chosen entries.
    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator.
    """
    x = np.array(x, dtype=np.float64)  # owned contiguous copy; mutated in place
    _, grad = loss_fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    flat_idx = np.arange(x.size)
    excluded = 0
    if exclude is not None:
        ex = np.asarray(exclude, dtype=bool).reshape(-1)
        excluded = int(ex.sum())
        flat_idx = flat_idx[~ex]
    if sample is not None and sample < len(flat_idx):
        rng = rng or np.random.default_rng(0)
        flat_idx = rng.choice(flat_idx, size=sample, replace=False)
    max_err = 0.0
    xf = x.reshape(-1)
    for i in flat_idx:
        orig = xf[i]
        xf[i] = orig + epsilon
        hi, _ = loss_fn(x)
        xf[i] = orig - epsilon
        lo, _ = loss_fn(x)
        xf[i] = orig
        fd = (hi - lo) / (2.0 * epsilon)
        a = grad.reshape(-1)[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        max_err = max(max_err, err)
    return FDReport(max_err, len(flat_idx), excluded)
