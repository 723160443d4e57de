"""Quality-indicator regression from fluorescence excitation-emission matrices.

Modules: ``eemio`` (data model and files), ``preprocess`` (EEM to image), ``model``
(backbone + regression head), ``trainer`` (two-phase training, leave-one-oil-out),
``iea`` (occlusion sweeps and band importance), ``evalreport`` (metrics, figure data),
``synth`` (synthetic datasets), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
