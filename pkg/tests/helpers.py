"""Shared test utilities: finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from boxmatch import diffnum as dn


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def fd_directional(f, tensors, rng, h=1e-5, n_dirs=2) -> float:
    """Worst relative error between analytic directional derivatives of the
    scalar f() and central finite differences along random unit directions."""
    loss = f()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
             for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        base = t.data.copy()
        for _ in range(n_dirs):
            u = rng.standard_normal(t.data.shape)
            norm = np.linalg.norm(u.ravel())
            if norm == 0:
                continue
            u /= norm
            t.data = base + h * u
            fp = float(f().data)
            t.data = base - h * u
            fm = float(f().data)
            t.data = base
            fd = (fp - fm) / (2.0 * h)
            an = float((g * u).sum())
            worst = max(worst, rel_err(fd, an))
    return worst


def fd_full(f, tensors, h=1e-5) -> float:
    """Exhaustive per-coordinate central differences (small tensors only)."""
    loss = f()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
             for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        base = t.data.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, rel_err(fd, g.reshape(-1)[i]))
        t.data = base
    return worst


def relu_margin_ok(pre_activations, margin=1e-3) -> bool:
    """True when no ReLU input sits close enough to the kink to corrupt
    central differences."""
    return all(np.abs(z).min() > margin if np.asarray(z).size else True
               for z in pre_activations)


def mlp_preacts(x: np.ndarray, layers) -> list[np.ndarray]:
    """Pre-activation arrays of every hidden layer of an MLP stack."""
    pres = []
    h = x
    for i, (w, b) in enumerate(layers[:-1]):
        z = h @ w.data + b.data
        pres.append(z)
        h = np.maximum(z, 0.0)
    return pres
