"""Toy-scale diffusion training with per-timestep loss analysis.

Modules: ``tensorcore`` (autodiff and RNG streams), ``schedule``,
``predictor``, ``model``, ``tsampler``, ``profiler``, ``trainer``,
``inference``, ``datasets`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"
