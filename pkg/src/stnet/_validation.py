"""Input validation helpers shared by the estimators."""
import hashlib

import numpy as np
import torch


def check_images(X, resolution=None, name="X"):
    """Validate an image batch and return it as float32 ``(n, H, W, 3)``.

    Accepts a single ``(H, W, 3)`` image too. Pixel values must lie in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"{name} must hold square images, got {X.shape[1]}x{X.shape[2]}")
    if resolution is not None and X.shape[1] != resolution:
        raise ValueError(
            f"{name} has resolution {X.shape[1]}, expected {resolution}"
        )
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{name} pixel values must lie in [0, 1]")
    return X


def check_vectors(v, dim, name="input"):
    """Validate a batch of latent vectors; returns float32 ``(n, dim)``."""
    v = np.asarray(v, dtype=np.float32) if not torch.is_tensor(v) else v.detach().cpu().numpy()
    if v.ndim == 1:
        v = v[None]
    if v.ndim != 2 or v.shape[1] != dim:
        raise ValueError(f"{name} must have dimension {dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v.astype(np.float32, copy=False)


def to_nchw(X):
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))


def to_nhwc(t):
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def parameter_checksum(*modules):
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for module in modules:
        for name, t in module.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def batched(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
