"""Center-point detection of low-contrast objects.

The package trains an anchor-free detector whose feature pyramid is fused
with learned flow alignment, whose head refines its center heatmap through a
cascade of stages, and whose training combines box-guided contrastive
learning with a second stage that re-weights images by detection quality.
"""

__version__ = "0.1.0"
