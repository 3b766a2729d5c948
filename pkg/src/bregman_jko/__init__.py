"""
bregman-jko: minimizing-movement schemes for Fokker–Planck equations with
general transport costs (Bregman divergences, Mahalanobis, Dirichlet log cost).
"""

__version__ = "0.1.0"
