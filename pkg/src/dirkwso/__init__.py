"""Diagonally implicit Runge-Kutta schemes with high weak stage order.

Submodules: :mod:`tableau`, :mod:`conditions`, :mod:`wso`,
:mod:`stability`, :mod:`integrator`, :mod:`problems`, :mod:`convergence`,
:mod:`search` and :mod:`cli`.
"""
from .tableau import Tableau, builtin, builtin_names, from_text, to_text

__all__ = ["Tableau", "builtin", "builtin_names", "from_text", "to_text"]
__version__ = "0.1.0"
