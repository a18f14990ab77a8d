"""Mesh-based graph networks with a cotangent Laplace block and boundary padding
for learning spatiotemporal PDE dynamics."""

__version__ = "0.1.0"
