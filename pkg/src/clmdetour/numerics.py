"""Dense primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray``; a "grad store" is a ``dict`` mapping
parameter names to arrays of the parameter's shape.  Training runs in
float32, analysis and gradient checks in float64.  Loss reductions are
always accumulated in float64.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import kernels

GradStore = dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s) in array of shape {arr.shape}")


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalise the last axis of ``x`` then apply the affine ``gamma, beta``.

    Returns ``(y, cache)``; pass ``cache`` to :func:`layer_norm_backward`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    check_finite("layer_norm input", x)
    lead = x.shape[:-1]
    x2 = np.ascontiguousarray(x.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma, beta, eps)
    return y.reshape(x.shape), (xhat, rstd, gamma, lead)


def layer_norm_backward(dy: np.ndarray, cache):
    """Gradients ``(dx, dgamma, dbeta)`` for :func:`layer_norm`."""
    xhat, rstd, gamma, lead = cache
    d = xhat.shape[1]
    dx, dgamma, dbeta = kernels.layer_norm_bwd(np.ascontiguousarray(dy.reshape(-1, d)), xhat, rstd, gamma)
    return dx.reshape(*lead, d), dgamma, dbeta


# ---------------------------------------------------------------------------
# GELU (tanh form)
# ---------------------------------------------------------------------------


def gelu(u: np.ndarray):
    """Tanh-approximate GELU.  Returns ``(g, cache)``."""
    g, t = kernels.gelu_fwd(u)
    return g, (u, t)


def gelu_backward(dg: np.ndarray, cache) -> np.ndarray:
    u, t = cache
    return kernels.gelu_bwd(u, t, dg)


# ---------------------------------------------------------------------------
# attention softmax
# ---------------------------------------------------------------------------


def attention_softmax(scores: np.ndarray, causal: bool) -> np.ndarray:
    """Row softmax of a ``(..., L, L)`` score array; future keys get weight 0 when causal.

    The input is consumed (overwritten) to avoid a copy.
    """
    shape = scores.shape
    s3 = scores.reshape(-1, shape[-2], shape[-1])
    return kernels.softmax_rows_(s3, causal).reshape(shape)


def attention_softmax_backward(p: np.ndarray, dp: np.ndarray, causal: bool) -> np.ndarray:
    shape = p.shape
    ds = kernels.softmax_bwd(
        p.reshape(-1, shape[-2], shape[-1]), np.ascontiguousarray(dp).reshape(-1, shape[-2], shape[-1]), causal
    )
    return ds.reshape(shape)


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, targets: np.ndarray, supervision_mask: np.ndarray):
    """Mean NLL over supervised rows of ``logits`` (shape ``(n, V)``).

    Returns ``(loss, dlogits)`` where ``loss`` is a Python float computed in
    float64 and ``dlogits`` has exact zeros on unsupervised rows.

    Raises:
        ValueError: if no row is supervised or a supervised target is outside
            ``[0, V)``.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be 2-D (n, V)")
    n, vocab = logits.shape
    targets = np.asarray(targets).reshape(-1)
    mask = np.asarray(supervision_mask, dtype=bool).reshape(-1)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError("targets/supervision_mask must have one entry per logit row")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty supervision set")
    sup = targets[mask]
    if sup.min() < 0 or sup.max() >= vocab:
        raise ValueError(f"cross_entropy: target outside [0, {vocab})")
    check_finite("logits", logits)
    safe_targets = np.where(mask, targets, 0).astype(np.int64)
    loss_sum, grad = kernels.xent(np.ascontiguousarray(logits), safe_targets, mask)
    grad /= count
    return loss_sum / count, grad


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    floor: float = 1e-3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(loss, grads)`` and be deterministic.  Params
    are perturbed in place and restored.  Each elementwise error is
    ``|a - n| / max(|a|, |n|, floor * G)`` where ``G`` is the largest numeric
    gradient magnitude across all parameters; the floor keeps entries whose
    true gradient is ~0 from dominating through roundoff alone.

    Raises:
        ValueError: if ``eps`` is outside ``[1e-7, 1e-3]`` or ``fn`` is not
            deterministic.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    loss0, grads = fn(params)
    loss0b, _ = fn(params)
    if loss0 != loss0b:
        raise ValueError(f"grad_check: non-deterministic function ({loss0!r} != {loss0b!r})")
    analytic = {k: np.array(grads[k], dtype=np.float64, copy=True) for k in params}
    numeric: dict[str, np.ndarray] = {}
    for name, p in params.items():
        num = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = fn(params)
            flat[i] = orig - eps
            fm, _ = fn(params)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        numeric[name] = num
    scale = max((float(np.abs(v).max()) for v in numeric.values() if v.size), default=0.0)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-300))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
