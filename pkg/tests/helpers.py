"""Shared test utilities."""

from __future__ import annotations

import numpy as np

from paam import cnn


def randomize_norms(net: cnn.Network, rng: np.random.Generator) -> None:
    """Give every normalization non-trivial statistics and affine parameters.

    Freshly built networks have identity norms, which hide indexing bugs in
    code that slices or masks them.
    """
    for n in net.norms():
        c = n.gamma.shape[0]
        n.running_mean = rng.normal(0, 0.5, size=c)
        n.running_var = rng.uniform(0.5, 2.0, size=c)
        n.gamma.data[:] = rng.normal(1.0, 0.3, size=c)
        n.beta.data[:] = rng.normal(0.0, 0.2, size=c)
