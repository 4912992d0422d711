"""Portfolio optimization under a hidden Gaussian drift with randomly arriving expert views.

Filtering, the risk-sensitive control reformulation, a dynamic-programming PIDE
solver for one asset, Monte Carlo strategy evaluation and regularization
diagnostics.
"""

__version__ = "0.1.0"
