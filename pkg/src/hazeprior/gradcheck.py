"""Finite-difference validation of analytic gradients.

The checker treats the function under test as a black box: one reverse-mode
sweep collects analytic gradients, then every entry of every checked input is
perturbed by +/- eps and the scalar re-evaluated forward-only.  Comparison is
entrywise relative error with a unit floor, so near-zero derivatives are
compared absolutely.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, no_grad

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-4


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = DEFAULT_EPS, max_entries_per_input: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Parameters
    ----------
    f : callable
        Maps the input tensors to a scalar Tensor.  Must rebuild its graph on
        every call (it is re-evaluated ~2x the checked entry count).
    inputs : sequence of Tensor
        Leaves to check; all must have ``requires_grad``.  Their data is
        perturbed in place and restored.
    eps : float
        Central-difference step.
    max_entries_per_input : int, optional
        When set, check a deterministic random subsample of at most this many
        entries per input instead of every entry.  Keeps the check tractable
        for whole-model parameter lists.
    seed : int
        Seed for the subsample draw.

    Returns
    -------
    float
        ``max |analytic - fd| / max(1, |fd|)`` over every checked entry of
        every input.  Inputs the scalar does not depend on count as analytic 0.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("grad_check inputs must be Tensors with requires_grad")
        t.zero_grad()

    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got {out.shape}")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    pick = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            an_flat = an.reshape(-1)
            if max_entries_per_input is None or flat.size <= max_entries_per_input:
                indices = range(flat.size)
            else:
                indices = np.sort(pick.choice(flat.size, max_entries_per_input,
                                              replace=False))
            for i in indices:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data.reshape(()))
                flat[i] = orig - eps
                fm = float(f(*inputs).data.reshape(()))
                flat[i] = orig
                fd = (fp - fm) / (2.0 * eps)
                rel = abs(an_flat[i] - fd) / max(1.0, abs(fd))
                if rel > worst:
                    worst = rel
    return worst


# ---------------------------------------------------------------------------
# canned whole-module checks
# ---------------------------------------------------------------------------

MODULE_CHECKS = ("dgam", "dpfm", "net")


def check_module(module: str, seed: int = 3) -> float:
    """Finite-difference check of one module at a conditioned weight point.

    Check points are chosen kink-safe (ReLU pre-activations pushed away from
    zero) and curvature-safe (trunk gains damped) so the eps window sits in
    the linear regime; see the fd_check_point notes in the network module.
    """
    if module == "dgam":
        from .dgam import dgam_forward, init_dgam
        rng = np.random.default_rng(seed)
        w = init_dgam(8, np.random.default_rng(seed))
        for t in (w.refine0_w, w.refine1_w):
            t.data[...] = np.abs(t.data)
        for t in (w.refine0_b, w.refine1_b):
            t.data[...] = 0.3
        img = Tensor(rng.uniform(0, 1, size=(1, 3, 8, 8)))
        dep = Tensor(rng.uniform(0.1, 1, size=(1, 1, 8, 8)))
        params = [t for _, t in w.named()]
        return grad_check(lambda *_: dgam_forward(img, dep, w).sum(), params)

    if module == "dpfm":
        from .dpfm import WindowGeometry, dpfm_block, init_dpfm
        rng = np.random.default_rng(seed)
        geom = WindowGeometry(m=4, r=0.5, heads=2)
        w = init_dpfm(8, geom, np.random.default_rng(seed))
        opener = np.random.default_rng(10_000 + seed)
        for _, t in w.named():
            if not t.data.any():
                t.data[...] = opener.normal(0.0, 0.2, size=t.shape)
        x = Tensor(rng.normal(size=(1, 8, 8, 8)))
        d = Tensor(rng.uniform(0, 1, size=(1, 1, 8, 8)))
        params = [t for _, t in w.named()]
        return grad_check(lambda *_: dpfm_block(x, d, w, geom).sum(), params)

    if module == "net":
        from .network import NetConfig, fd_check_point, forward
        from .tensor import abs_, mean, sub
        rng = np.random.default_rng(seed)
        cfg = NetConfig(base_channels=8, blocks_per_stage=1, window=4,
                        overlap_ratio=0.5, heads=2, seed=seed)
        w = fd_check_point(cfg, seed=seed)
        hazy = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 16, 16)))
        depth = Tensor(rng.uniform(0.1, 1.0, size=(1, 1, 16, 16)))
        target = Tensor(forward(hazy, depth, cfg, w)[0].data + 0.5)
        params = [t for _, t in w.named()]

        def f(*_):
            return mean(abs_(sub(forward(hazy, depth, cfg, w)[0], target)))

        return grad_check(f, params, max_entries_per_input=3, seed=seed)

    raise ValueError(f"unknown gradcheck module {module!r}, "
                     f"expected one of {MODULE_CHECKS}")


def check_all(seed: int = 3) -> dict:
    """Every module check, in declaration order."""
    return {m: check_module(m, seed) for m in MODULE_CHECKS}
