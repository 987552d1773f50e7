"""Extrapolation-aware Gaussian scene-graph toolkit (CPU).

A desk-scale differentiable renderer for driving-style scenes built from four
node types (background, road surface, far field, sky), with a height-field SDF
backing the road geometry, a joint position/scale reparameterization for
distant content, and a per-Gaussian view-direction density that renders into a
per-pixel uncertainty map.
"""

__version__ = "0.1.0"
