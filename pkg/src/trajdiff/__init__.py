"""Constraint-aligned diffusion models for warm-starting trajectory optimization.

The package covers the full pipeline: generating locally-optimal trajectory
datasets with a built-in augmented-Lagrangian solver, training conditional
denoising diffusion models (vanilla and constraint-aligned), and evaluating
feasibility and warm-start quality of the generated trajectories.
"""

__version__ = "0.1.0"
