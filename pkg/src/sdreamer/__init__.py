"""Mixture-of-modality-experts transformer for EEG/EMG sleep staging.

Submodules: ``tensor`` (autodiff engine), ``mome`` (expert layers),
``signal_prep`` (containers, preprocessing, synthetic data), ``models``,
``training`` and ``cli``.
"""

__version__ = "0.1.0"
