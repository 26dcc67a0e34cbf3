"""geowarp: measure the geometric misalignment between a graph's connectivity
and the Riemannian geometry of its node-attribute manifold.

A two-phase variational autoencoder first learns the attribute manifold, then
warps its metric so that a heat kernel over latent geodesic distances matches
the graph adjacency.  The warping needed is emitted as link- and node-level
distortion scores usable for anomaly detection.
"""

__version__ = "0.1.0"

from .nn import MlpNetwork, adam_step, backward, forward, input_jacobian

__all__ = [
    "__version__",
    "MlpNetwork",
    "adam_step",
    "backward",
    "forward",
    "input_jacobian",
]
