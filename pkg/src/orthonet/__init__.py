"""orthonet: learning orthogonal weight matrices in feed-forward networks.

The package is organized as a small numerical core plus an experiment CLI:

- linalg: from-scratch symmetric eigendecomposition, unique QR, small solves
- olm: the orthogonalizing reparameterization and its exact backward pass
- stiefel: Riemannian gradients, QR retraction, Cayley updates, QR projection
- nn: minimal MLP stack (layers, loss, optimizers, training loop)
- data: IDX image loading, synthetic Gaussian datasets, batching
- harness: experiment runner, sweeps, verification suites, checkpoints
- estimator: sklearn-style classifier facade over the nn stack
"""

__version__ = "0.1.0"

from . import data, estimator, harness, linalg, nn, olm, stiefel  # noqa: F401
from .estimator import OrthoMLPClassifier  # noqa: F401

__all__ = [
    "linalg",
    "olm",
    "stiefel",
    "nn",
    "data",
    "harness",
    "estimator",
    "OrthoMLPClassifier",
]
