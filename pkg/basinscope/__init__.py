"""basinscope: explanation-stability diagnostics for repeatedly trained models.

The package trains populations of models, turns every run into a global
attribution vector and checks whether those vectors form one coherent mode or
several explanatory basins.
"""

__version__ = "0.1.0"
