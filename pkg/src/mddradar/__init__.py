"""Margin disparity discrepancy (MDD) domain adaptation for FMCW radar activity recognition.

Everything runs on numpy: a small reverse-mode autodiff core
(:mod:`~mddradar.numerics`), the margin and cross-entropy losses
(:mod:`~mddradar.losses`), a twin-branch CNN (:mod:`~mddradar.model`), the
adaptation objective (:mod:`~mddradar.mdd`), a synthetic spectrogram
generator (:mod:`~mddradar.synthdata`) and the training harness
(:mod:`~mddradar.train`).
"""

__version__ = "0.1.0"
