"""Finite-difference gradient oracle shared by the test modules."""
import numpy as np
import torch


def fd_relative_error(objective, tensors, step, probes_per_tensor=3, seed=0):
    """Compare autograd against central differences on randomly probed entries.

    ``objective()`` must return a scalar tensor built from ``tensors``
    (leaf tensors with ``requires_grad``). Returns
    ``||g_fd - g_ad|| / max(||g_ad||, ||g_fd||)`` over all probes, together
    with the analytic norm so callers can reject a vacuous all-zero check.
    """
    for t in tensors:
        t.grad = None
    objective().backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            picks = rng.choice(flat.numel(), size=min(probes_per_tensor, flat.numel()), replace=False)
            grad = t.grad.reshape(-1)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                plus = objective().item()
                flat[i] = orig - step
                minus = objective().item()
                flat[i] = orig
                numeric.append((plus - minus) / (2 * step))
                analytic.append(grad[i].item())
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0, 0.0
    return float(np.linalg.norm(a - n) / scale), float(np.linalg.norm(a))


def jitter_parameters(module, scale=0.05, seed=0):
    """Add Gaussian noise to every trainable parameter (breaks zero-init symmetry)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module
