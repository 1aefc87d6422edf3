"""DP-SGD with a clipping threshold regulated by the heavy-tailed spectral exponent of the weights.

Modules: ``linalg`` (norms, SVD, seeded streams), ``model`` (MLP with
per-example gradients), ``dp`` (clip/noise mechanism), ``spectral`` (tail
exponent probe), ``controller``, ``accountant`` (RDP), ``trainer`` and
``harness`` (configs, data, presets, CLI output).
"""
__version__ = "0.1.0"
