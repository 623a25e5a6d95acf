"""Central finite-difference gradient checking over sampled tensor entries."""

import numpy as np
import torch


def rel_error(a, n, floor=1e-7):
    # near-zero pairs are compared absolutely; everything else relatively
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check(loss_fn, params: dict, n_samples=None, eps=1e-6, rng=None):
    """Return relative errors between autograd and central differences.

    ``loss_fn(params) -> scalar tensor``; ``params`` maps names to float64
    leaf tensors with requires_grad. Samples ``n_samples`` entries uniformly
    over all parameters (all of them when None).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(params)
    loss = loss_fn(params)
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}
    sizes = np.array([params[k].numel() for k in names])
    total = int(sizes.sum())
    flat = np.arange(total) if n_samples is None or n_samples >= total else rng.choice(total, n_samples, replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    for f in flat:
        which = int(np.searchsorted(bounds, f, side="right"))
        k = names[which]
        idx = int(f - (bounds[which - 1] if which else 0))
        p = params[k].view(-1)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn(params).item()
            p[idx] = orig - eps
            dn = loss_fn(params).item()
            p[idx] = orig
        num = (up - dn) / (2 * eps)
        errs.append(rel_error(grads[k].view(-1)[idx].item(), num))
    return np.array(errs)
