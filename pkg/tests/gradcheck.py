"""Central finite-difference check of autograd gradients on sampled parameter entries."""

import numpy as np
import torch


def sampled_gradcheck(module, loss_fn, n_entries=64, h=1e-6, seed=0, floor=1e-6):
    """Return ``(max_rel_err, n_checked)`` for ``loss_fn()`` w.r.t. random entries of ``module``'s parameters."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=n_entries, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = loss_fn().item()
            view[j] = orig - h
            down = loss_fn().item()
            view[j] = orig
            num = (up - down) / (2 * h)
            ana = grads[i].view(-1)[j].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst, len(picks)
