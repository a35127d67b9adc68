"""Generative design toolchain for soft gripper fingers.

Multi-load-case SIMP topology optimization over a tapered 2D finger domain,
with multi-start campaign orchestration, Pareto extraction and linear-FEM
grasp-proxy verification.
"""

__version__ = "0.1.0"
