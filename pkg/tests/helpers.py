"""Shared test utilities: non-kink gradient checking for the toy embedder."""

import numpy as np

from retinareg.losses import (
    LossConfig,
    hard_negative_mining,
    init_toy_params,
    toy_forward,
    toy_multitask_step,
    toy_multitask_value,
)


def _discrete_signature(params, det_x, anc, pos, margin):
    """Activation masks, mining indices, and hinge signs: the non-smooth bits."""
    sig = []
    for batch in (det_x, anc, pos):
        _, _, cache = toy_forward(params, batch)
        _, h1, h2, _, _, _, _ = cache
        sig.append(h1 > 0)
        sig.append(h2 > 0)
    _, desc_a, _ = toy_forward(params, anc)
    _, desc_p, _ = toy_forward(params, pos)
    n_a, n_p = hard_negative_mining(desc_a, desc_p)
    d_ap = np.linalg.norm(desc_a - desc_p, axis=1)
    d_an = np.linalg.norm(desc_a - desc_p[n_a], axis=1)
    d_pn = np.linalg.norm(desc_p - desc_a[n_p], axis=1)
    sig.append(n_a)
    sig.append(n_p)
    sig.append(margin + d_ap - d_an > 0)
    sig.append(margin + d_ap - d_pn > 0)
    return sig


def _signatures_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def embedder_jvp_checks(seed=0, trials=10, hidden=16, descriptor_dim=8,
                        h=1e-6, rtol=1e-4):
    """Directional-derivative checks of the full embedder + multitask loss.

    Directions whose +/-h evaluations cross a kink (ReLU flip, mined-index
    change, or hinge-sign change) are skipped; the small step keeps interior
    crossings that endpoint signatures cannot see rare.  Returns the number
    of directions actually asserted.
    """
    rng = np.random.default_rng(seed)
    params = init_toy_params(seed + 1, hidden=hidden, descriptor_dim=descriptor_dim)
    det_x = rng.uniform(0, 1, (6, 32, 32, 3))
    det_y = rng.integers(0, 2, 6)
    anc = rng.uniform(0, 1, (4, 32, 32, 3))
    pos = rng.uniform(0, 1, (4, 32, 32, 3))
    cfg = LossConfig()
    _, grads = toy_multitask_step(params, det_x, det_y, anc, pos, cfg)

    checked = 0
    for _ in range(trials):
        direction = {n: rng.standard_normal(getattr(params, n).shape)
                     for n in params.names()}
        plus = params.copy()
        minus = params.copy()
        for n in params.names():
            getattr(plus, n)[:] += h * direction[n]
            getattr(minus, n)[:] -= h * direction[n]
        sig_p = _discrete_signature(plus, det_x, anc, pos, cfg.margin)
        sig_m = _discrete_signature(minus, det_x, anc, pos, cfg.margin)
        if not _signatures_equal(sig_p, sig_m):
            continue
        analytic = sum((grads[n] * direction[n]).sum() for n in params.names())
        up = toy_multitask_value(plus, det_x, det_y, anc, pos, cfg)
        down = toy_multitask_value(minus, det_x, det_y, anc, pos, cfg)
        fd = (up - down) / (2 * h)
        assert abs(analytic - fd) <= rtol * max(abs(fd), 1e-8), (analytic, fd)
        checked += 1
    return checked
