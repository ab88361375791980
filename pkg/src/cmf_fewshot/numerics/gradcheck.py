"""Central finite-difference checks against :meth:`Graph.backward`."""
from __future__ import annotations

from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .graph import Graph, Node


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise.

    The floor sits above central-difference round-off (about 1e-11 for an
    O(1) loss at h = 1e-5) so exactly-zero gradients do not read as errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    name: str,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    kink_tol: Optional[float] = None,
    skipped: Optional[List[int]] = None,
) -> Dict[int, float]:
    """Central differences of ``loss_fn`` w.r.t. entries of ``params[name]``.

    Returns ``{flat_index: derivative}``; with ``max_entries`` only a random
    subset of entries is probed.

    With ``kink_tol`` each entry is also probed at ``h / 2``. On a smooth
    loss the central differences at both steps agree to O(h^2), and the
    second difference ``(f(x+s) - 2 f(x) + f(x-s)) / s`` halves with ``s``.
    Entries violating either by more than ``kink_tol * max(1, |d|)`` straddle
    a ReLU or max-pool kink; they are left out of the result and appended
    to ``skipped``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    flat_size = base[name].size
    idx = np.arange(flat_size)
    if max_entries is not None and flat_size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat_size, max_entries, replace=False))
    shape = base[name].shape

    def at(i, step):
        moved = dict(base)
        v = base[name].copy().reshape(-1)
        v[i] += step
        moved[name] = v.reshape(shape)
        return loss_fn(moved)

    out = {}
    f0 = loss_fn(base) if kink_tol is not None else None
    for i in idx:
        fp, fm = at(i, h), at(i, -h)
        d = (fp - fm) / (2 * h)
        if kink_tol is not None:
            hp, hm = at(i, h / 2), at(i, -h / 2)
            central_gap = d - (hp - hm) / h
            curvature_gap = (fp - 2 * f0 + fm) / h - 2 * (hp - 2 * f0 + hm) / (h / 2)
            if max(abs(central_gap), abs(curvature_gap)) > kink_tol * max(1.0, abs(d)):
                if skipped is not None:
                    skipped.append(int(i))
                continue
        out[int(i)] = d
    return out


def check_gradients(build: Callable[[Graph, Dict[str, Node]], Node], params: Mapping[str, np.ndarray], h: float = 1e-5, max_entries: Optional[int] = 40, seed: int = 0) -> Dict[str, float]:
    """Compare analytic and central-difference gradients in float64.

    ``build(graph, param_nodes)`` must construct a scalar loss from the given
    parameter nodes. Returns the max relative error per parameter name.
    """

    def run(values: Mapping[str, np.ndarray]):
        g = Graph("float64")
        nodes = {k: g.param(k, v) for k, v in values.items()}
        return g, build(g, nodes)

    g, loss = run(params)
    analytic = g.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(params):
        numeric = numeric_gradient(lambda v: float(run(v)[1].value), params, name, h=h, max_entries=max_entries, rng=rng)
        idx = np.array(sorted(numeric))
        a = analytic[name].reshape(-1)[idx]
        n = np.array([numeric[i] for i in idx])
        errors[name] = relative_error(a, n)
    return errors
