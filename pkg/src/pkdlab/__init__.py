"""Prior-knowledge distillation lab.

Dense networks trained from scratch in numpy, technical-indicator
sub-networks assembled into a teacher, and a small student trained by
co-distillation.  The harness sweeps noise levels over synthetic
random-walk regimes and emits delimited reports plus rendered figures.
"""

__version__ = "0.1.0"
