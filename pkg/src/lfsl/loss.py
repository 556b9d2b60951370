"""Classification and regression losses for the center-heatmap detector.

The sample-adaptive-balance (SAB) loss is a weighted binary cross-entropy
over heatmap cells with three weight pools, recomputed per training sample
and per class channel:

* positive cells (y = 1): ``w_pos = sqrt(1 - s)`` with ``s`` the predicted
  score at that cell,
* easy negatives (y = 0, f <= theta): ``w_neg = num_pos / (num_pos + num_neg)``,
* hard negatives (y = 0, f > theta): ``w_hn = num_hn / (num_hn + num_pos)``.

All weights are treated as constants when differentiating (detached), so the
per-cell gradient is ``w * (f - y) / (f * (1 - f))`` inside the clamp band.
Finite-difference checks therefore evaluate the weighted cross-entropy with
the weights frozen at the unperturbed point; see :func:`grad_check`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .seeding import DOMAIN_GRADCHECK, substream


@dataclass
class SabConfig:
    """Hyper-parameters of the SAB loss."""

    theta: float = 0.1  # hard-negative response threshold
    epsilon: float = 1e-7  # clamp for log arguments
    detach_weights: bool = True  # fixed; the gradient never flows through weights

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must be in (0, 1), got {self.theta}")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError(f"epsilon must be in (0, 0.5), got {self.epsilon}")
        if self.detach_weights is not True:
            raise ConfigError("weight detachment is fixed true")


@dataclass
class SabStats:
    """Pool sizes and pool weights for one (sample, class-channel) heatmap."""

    num_pos: int
    num_neg: int
    num_hn: int
    w_neg: float
    w_hn: float


@dataclass
class LossBreakdown:
    """Combined objective: classification + lambda * regression."""

    classification: float
    regression: float
    lam: float = 0.25

    @property
    def total(self) -> float:
        return self.classification + self.lam * self.regression


@dataclass
class LossConfig:
    """Objective selection for a training stage.

    kind chooses the classification loss on trainable head channels; with
    "sab", sab_novel_only restricts it to novel channels (frozen channels
    always keep the focal baseline).
    """

    kind: str = "focal"
    sab: SabConfig = field(default_factory=SabConfig)
    lam: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0
    sab_novel_only: bool = False

    def __post_init__(self):
        if self.kind not in ("focal", "sab"):
            raise ConfigError(f"unknown classification loss {self.kind!r}")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")


def w_neg_from_counts(num_pos: int, num_neg: int) -> float:
    """Easy-negative pool weight; 0/0 resolves to 0 (empty heatmap)."""
    denom = num_pos + num_neg
    if denom == 0:
        return 0.0
    return num_pos / denom


def w_hn_from_counts(num_hn: int, num_pos: int) -> float:
    """Hard-negative pool weight; 0/0 resolves to 1 (the num_pos -> 0 limit)."""
    denom = num_hn + num_pos
    if denom == 0:
        return 1.0
    return num_hn / denom


def w_pos_from_score(s) -> np.ndarray:
    """Positive-cell weight sqrt(1 - s)."""
    return np.sqrt(1.0 - np.asarray(s, dtype=np.float64))


def _as_channels(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ContractError(f"{name} must be 2D or 3D, got shape {a.shape}")
    return a


def _check_shapes(f: np.ndarray, y: np.ndarray):
    if f.shape != y.shape:
        raise ContractError(f"shape mismatch: pred {f.shape} vs target {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("targets must be binary")


def sab_weights(f, y, cfg: SabConfig, ignore_mask=None):
    """Per-cell weight grid and per-channel pool stats for the SAB loss.

    ``f`` and ``y`` are (C, nx, ny) or (nx, ny); pools are computed per
    channel on the clamped scores.  Ignored cells get weight 0 and are
    excluded from every pool.
    """
    f = _as_channels(f, "pred")
    y = _as_channels(y, "target")
    _check_shapes(f, y)
    fc = np.clip(f, cfg.epsilon, 1.0 - cfg.epsilon)
    if ignore_mask is None:
        valid = np.ones_like(f, dtype=bool)
    else:
        valid = ~_as_channels(ignore_mask, "ignore_mask").astype(bool)
    w = np.zeros_like(f)
    stats = []
    for c in range(f.shape[0]):
        pos = (y[c] == 1.0) & valid[c]
        neg = (y[c] == 0.0) & valid[c]
        hn = neg & (fc[c] > cfg.theta)
        easy = neg & ~hn
        num_pos = int(pos.sum())
        num_neg = int(neg.sum())
        num_hn = int(hn.sum())
        w_neg = w_neg_from_counts(num_pos, num_neg)
        w_hn = w_hn_from_counts(num_hn, num_pos)
        w[c][pos] = np.sqrt(1.0 - fc[c][pos])
        w[c][easy] = w_neg
        w[c][hn] = w_hn
        stats.append(SabStats(num_pos, num_neg, num_hn, w_neg, w_hn))
    return w, stats


def weighted_bce_value(f, y, w, epsilon: float = 1e-7) -> float:
    """-sum w * [y log f + (1-y) log(1-f)] with f clamped; weights fixed."""
    f = _as_channels(f, "pred")
    y = _as_channels(y, "target")
    w = _as_channels(w, "weights")
    fc = np.clip(f, epsilon, 1.0 - epsilon)
    terms = w * (y * np.log(fc) + (1.0 - y) * np.log1p(-fc))
    return float(-terms.sum())


def sab_loss(f, y, cfg: SabConfig = SabConfig(), ignore_mask=None):
    """SAB loss value, per-cell gradient d loss / d f, and pool stats.

    Returns ``(value, grad, stats)`` where ``grad`` has the input shape and
    ``stats`` is one :class:`SabStats` per class channel.
    """
    f_in = np.asarray(f, dtype=np.float64)
    f3 = _as_channels(f_in, "pred")
    y3 = _as_channels(y, "target")
    w, stats = sab_weights(f3, y3, cfg, ignore_mask)
    value = weighted_bce_value(f3, y3, w, cfg.epsilon)
    fc = np.clip(f3, cfg.epsilon, 1.0 - cfg.epsilon)
    inside = (f3 > cfg.epsilon) & (f3 < 1.0 - cfg.epsilon)
    grad = w * (fc - y3) / (fc * (1.0 - fc)) * inside
    if ignore_mask is not None:
        grad = grad * ~_as_channels(ignore_mask, "ignore_mask").astype(bool)
    return value, grad.reshape(f_in.shape), stats


def focal_loss(f, y, alpha: float = 0.25, gamma: float = 2.0,
               epsilon: float = 1e-7, ignore_mask=None):
    """Standard focal loss, summed over cells, with its full gradient.

    Positive cells contribute ``-alpha (1-f)^gamma log f``; negatives
    ``-(1-alpha) f^gamma log(1-f)``.  Unlike the SAB loss the modulating
    factors are differentiated through.
    """
    f_in = np.asarray(f, dtype=np.float64)
    f3 = _as_channels(f_in, "pred")
    y3 = _as_channels(y, "target")
    _check_shapes(f3, y3)
    fc = np.clip(f3, epsilon, 1.0 - epsilon)
    if ignore_mask is None:
        valid = 1.0
    else:
        valid = (~_as_channels(ignore_mask, "ignore_mask").astype(bool)).astype(np.float64)
    pos = y3 * valid
    neg = (1.0 - y3) * valid
    log_f = np.log(fc)
    log_1mf = np.log1p(-fc)
    value = float(np.sum(pos * (-alpha * (1.0 - fc) ** gamma * log_f)
                         + neg * (-(1.0 - alpha) * fc ** gamma * log_1mf)))
    inside = (f3 > epsilon) & (f3 < 1.0 - epsilon)
    dpos = alpha * (gamma * (1.0 - fc) ** (gamma - 1.0) * log_f - (1.0 - fc) ** gamma / fc)
    dneg = (1.0 - alpha) * (fc ** gamma / (1.0 - fc) - gamma * fc ** (gamma - 1.0) * log_1mf)
    grad = (pos * dpos + neg * dneg) * inside
    return value, grad.reshape(f_in.shape)


def regression_loss(pred, target, positive_mask):
    """Mean absolute error over positive cells and regression channels.

    ``pred`` and ``target`` are (R, nx, ny); ``positive_mask`` is (nx, ny).
    Returns 0 with a zero gradient when the mask is empty.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    mask = np.asarray(positive_mask, dtype=bool)
    if mask.shape != pred.shape[-mask.ndim:]:
        raise ContractError(f"mask shape {mask.shape} incompatible with pred {pred.shape}")
    n_entries = int(mask.sum()) * (pred.size // np.prod(mask.shape, dtype=int))
    grad = np.zeros_like(pred)
    if n_entries == 0:
        return 0.0, grad
    diff = (pred - target) * mask
    value = float(np.abs(diff).sum() / n_entries)
    grad = np.sign(diff) * mask / n_entries
    return value, grad


def total_loss(cls_value: float, reg_value: float, lam: float = 0.25) -> LossBreakdown:
    """Combine classification and regression per the lambda-weighted objective."""
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    return LossBreakdown(float(cls_value), float(reg_value), float(lam))


# --------------------------------------------------------------------------
# Finite-difference verification harness
# --------------------------------------------------------------------------

def _random_heatmap_case(rng: np.random.Generator, theta: float):
    """Random (f, y) pair with every score at least 1e-4 away from theta."""
    c = int(rng.integers(1, 4))
    nx = int(rng.integers(4, 9))
    ny = int(rng.integers(4, 9))
    while True:
        f = rng.uniform(0.02, 0.98, size=(c, nx, ny))
        if np.all(np.abs(f - theta) > 1e-4):
            break
    y = (rng.uniform(size=(c, nx, ny)) < 0.3).astype(np.float64)
    return f, y


def grad_check(loss_selector: str, case_seed: int, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Builds one random small case per seed.  For the SAB loss the difference
    quotient is taken on the weighted cross-entropy with the pool weights
    frozen at the unperturbed point (the weights are detached constants of
    the loss, so that frozen functional is exactly what the analytic
    gradient differentiates).  Perturbations never cross the theta boundary
    because cases are resampled until every cell clears it by 1e-4.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ContractError(f"eps must be in [1e-8, 1e-4], got {eps}")
    rng = substream(case_seed, DOMAIN_GRADCHECK)
    cfg = SabConfig()
    if loss_selector == "sab":
        f, y = _random_heatmap_case(rng, cfg.theta)
        _, grad, _ = sab_loss(f, y, cfg)
        w, _ = sab_weights(f, y, cfg)
        wf, yf = w.reshape(-1), y.reshape(-1)

        def term_fn(v: float, i: int) -> float:
            fc = min(max(v, cfg.epsilon), 1.0 - cfg.epsilon)
            return -wf[i] * (yf[i] * np.log(fc) + (1.0 - yf[i]) * np.log1p(-fc))

        x = f
    elif loss_selector == "focal":
        f, y = _random_heatmap_case(rng, cfg.theta)
        _, grad = focal_loss(f, y)
        yf = y.reshape(-1)

        def term_fn(v: float, i: int) -> float:
            fc = min(max(v, 1e-7), 1.0 - 1e-7)
            if yf[i] == 1.0:
                return -0.25 * (1.0 - fc) ** 2 * np.log(fc)
            return -0.75 * fc ** 2 * np.log1p(-fc)

        x = f
    elif loss_selector == "regression":
        r, nx, ny = 4, 6, 6
        target = rng.normal(size=(r, nx, ny))
        mask = rng.uniform(size=(nx, ny)) < 0.2
        while True:
            pred = rng.normal(size=(r, nx, ny))
            if np.all(np.abs(pred - target) > 1e-4):
                break
        _, grad = regression_loss(pred, target, mask)
        n_entries = max(int(mask.sum()) * r, 1)
        tf = target.reshape(-1)
        mf = np.broadcast_to(mask, target.shape).reshape(-1)

        def term_fn(v: float, i: int) -> float:
            return abs(v - tf[i]) * mf[i] / n_entries

        x = pred
    else:
        raise ContractError(f"unknown loss selector {loss_selector!r}")
    # All three losses are entrywise sums, so the central difference of the
    # full objective equals the central difference of the one perturbed
    # term.  Differencing the term directly keeps the probe in the term's
    # own scale; differencing two nearly equal O(10..100) sums would bury
    # gradients of magnitude ~1e-3 under roundoff.
    return max_fd_error_separable(term_fn, x, grad, eps)


def max_fd_error_separable(term_fn, x: np.ndarray, grad: np.ndarray,
                           eps: float) -> float:
    """FD check for objectives that are sums of single-entry terms.

    ``term_fn(v, i)`` must return the contribution of flat entry ``i`` when
    that entry takes value ``v``.
    """
    worst = 0.0
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        numeric = (term_fn(flat[i] + eps, i) - term_fn(flat[i] - eps, i)) / (2.0 * eps)
        denom = max(abs(numeric), abs(gflat[i]))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


def max_fd_error(value_fn, x: np.ndarray, grad: np.ndarray, eps: float,
                 skip_below: float = 1e-10) -> float:
    """Central finite differences of scalar ``value_fn`` at ``x`` vs ``grad``.

    Generic whole-objective probe for non-separable functions (e.g. a full
    network forward pass).  ``x`` is perturbed in place and restored.
    """
    worst = 0.0
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value_fn(x)
        flat[i] = orig - eps
        down = value_fn(x)
        flat[i] = orig
        numeric = (up - down) / (2.0 * eps)
        denom = max(abs(numeric), abs(gflat[i]))
        if denom < skip_below:
            continue
        worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
