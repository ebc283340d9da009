"""Pose-fused face alignment at desk scale.

A fully testable pipeline: differentiable engine, similarity-transform
geometry, synthetic morphable-model data, volumetric heatmaps, the
pose-fused alignment network, staged training with knowledge distillation,
and evaluation harnesses.
"""

__version__ = "0.1.0"
