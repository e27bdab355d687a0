"""Sparse optimal control of semilinear parabolic equations with space-time
finite elements on simplicial meshes."""

__version__ = "0.1.0"
