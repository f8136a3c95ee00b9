"""Independent oracles shared by the test modules.

Nothing here calls into the code under test beyond the function being checked.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from orthoseg import tensor as T
from orthoseg.nets import NetworkConfig, Parameters, forward


# --------------------------------------------------------- finite differences


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f: Callable[[float], float], eps: float, refinements: int = 2) -> float:
    """Central difference of ``f`` at 0, refined when the step straddles a kink.

    ReLU and max are piecewise linear, so a step that crosses a breakpoint
    returns the average of two one-sided slopes. If shrinking the step by 100x
    moves the estimate by more than its float64 roundoff, the smaller step is
    trusted instead.
    """
    hi, lo = f(eps), f(-eps)
    d = (hi - lo) / (2 * eps)
    for _ in range(refinements):
        eps /= 100.0
        hi, lo = f(eps), f(-eps)
        d_small = (hi - lo) / (2 * eps)
        noise = 64 * np.finfo(np.float64).eps * max(abs(hi), abs(lo), 1.0) / eps
        if abs(d_small - d) <= 1e-5 * max(abs(d), abs(d_small)) + noise:
            break
        d = d_small
    return d


def check_primitive(
    fn: Callable[..., T.Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    eps: float = 1e-6,
    max_coords: int = 40,
    dtype=np.float32,
) -> float:
    """Worst relative error of ``fn``'s analytic input gradients against
    central differences.

    The analytic gradient comes from ``dtype`` tensors; the numerical one is
    evaluated in float64 so that the oracle itself is not the bottleneck.
    The scalar objective is a random weighting of the output.
    """
    tensors = [T.Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = rng.normal(size=out.shape)
    T.weighted_sum(out, w).backward()

    def objective(arrays) -> float:
        o = fn(*[T.Tensor(a) for a in arrays])
        return float((o.data.astype(np.float64) * w).sum())

    base = [np.asarray(x, dtype=dtype).astype(np.float64) for x in inputs]
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = np.zeros(base[i].shape) if t.grad is None else t.grad.astype(np.float64)
        flat = np.arange(base[i].size)
        if flat.size > max_coords:
            flat = rng.choice(flat, max_coords, replace=False)
        num = np.empty(flat.size)
        for k, j in enumerate(flat):

            def shifted(h, i=i, j=j):
                moved = [a.copy() for a in base]
                moved[i].flat[j] += h
                return objective(moved)

            num[k] = central_difference(shifted, eps)
        worst = max(worst, rel_error(analytic.ravel()[flat], num))
    return worst


def check_network(
    params: Parameters,
    cfg: NetworkConfig,
    x: np.ndarray,
    rng: np.random.Generator,
    fraction: float = 0.01,
    min_coords: int = 12,
    eps: float = 1e-6,
) -> float:
    """Relative error of sampled parameter gradients plus the input gradient
    direction, end to end through ``forward`` in train mode."""
    assert cfg.dropout_p == 0.0, "dropout must be off for a deterministic objective"
    xt = T.Tensor(x.astype(np.float32), requires_grad=True)
    params.zero_grad()
    out = forward(params, cfg, xt, mode="train")
    w = rng.normal(size=out.shape)
    T.weighted_sum(out, w).backward()

    p64 = params.astype(np.float64)

    def objective(pp: Parameters, xx: np.ndarray) -> float:
        return float((forward(pp, cfg, xx, mode="train").data * w).sum())

    names = [k for k, _ in params]
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    n = max(min_coords, int(round(fraction * total)))
    picks = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[which], int(flat - offsets[which])
        g = params[name].grad
        analytic.append(0.0 if g is None else float(g.flat[j]))
        arr = p64[name].data
        keep = arr.flat[j]
        x64 = x.astype(np.float64)

        def shifted(h, arr=arr, j=j, keep=keep):
            arr.flat[j] = keep + h
            try:
                return objective(p64, x64)
            finally:
                arr.flat[j] = keep

        numeric.append(central_difference(shifted, eps))
    err_params = rel_error(np.array(analytic), np.array(numeric))

    # directional derivative with respect to the whole input
    v = rng.normal(size=x.shape)
    x64 = x.astype(np.float64)
    dirnum = central_difference(lambda h: objective(p64, x64 + h * v), eps)
    dirana = float((xt.grad.astype(np.float64) * v).sum())
    err_input = rel_error(np.array([dirana]), np.array([dirnum]))
    return max(err_params, err_input)


# ----------------------------------------------------------- plain oracles


def brute_confusion(pred, truth, valid=None) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) by walking every pixel."""
    pred = np.asarray(pred).ravel().tolist()
    truth = np.asarray(truth).ravel().tolist()
    valid = [True] * len(pred) if valid is None else np.asarray(valid).ravel().tolist()
    tp = fp = tn = fn = 0
    for p, t, ok in zip(pred, truth, valid):
        if not ok:
            continue
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def brute_otsu(hist: Sequence[int]) -> int:
    """Exhaustive scan: the smallest ``t`` minimizing the within-class sum of
    squares of ``bin <= t`` versus ``bin > t``, compared exactly.

    Within-class SS = sum(h*i^2) - S0^2/N0 - S1^2/N1, evaluated as a Fraction.
    """
    from fractions import Fraction

    hist = [int(h) for h in hist]
    q = sum(h * i * i for i, h in enumerate(hist))
    n_all = sum(hist)
    s_all = sum(h * i for i, h in enumerate(hist))
    best_t, best = None, None
    n0 = s0 = 0
    for t, h in enumerate(hist):
        n0 += h
        s0 += h * t
        n1, s1 = n_all - n0, s_all - s0
        if n0 == 0 or n1 == 0:
            continue
        within = q - Fraction(s0 * s0, n0) - Fraction(s1 * s1, n1)
        if best is None or within < best:
            best_t, best = t, within
    assert best_t is not None
    return best_t


def brute_partition_sse(values: Sequence[float]) -> tuple[float, frozenset]:
    """Optimal two-cluster split of a small 1-D point set by enumeration."""
    vals = list(values)
    n = len(vals)
    best = (float("inf"), frozenset())
    for mask in range(1, 2 ** n - 1):
        a = [v for i, v in enumerate(vals) if mask >> i & 1]
        b = [v for i, v in enumerate(vals) if not mask >> i & 1]
        sse = sum((v - np.mean(a)) ** 2 for v in a) + sum((v - np.mean(b)) ** 2 for v in b)
        if sse < best[0] - 1e-12:
            best = (sse, frozenset(i for i in range(n) if mask >> i & 1))
    return best
