"""Differentiable tree machines with a shared mixture-of-experts controller.

Trees are encoded as tensor product representations, transformed by a
differentiable car/cdr/cons interpreter, and decoded back to symbols.
"""

__version__ = "0.1.0"
