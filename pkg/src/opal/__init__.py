"""Multi-interest candidate matching with orthogonal hyper-categories.

Modules: ``data`` (logs, temporal split, sampling, synthetic generator),
``embedding`` (parameters and checkpoints), ``interest`` (soft/hard interests),
``losses`` and ``objective`` (training objective with gradients), ``trainer``
(two-stage Adam training), ``retrieval`` (exact MIPS), ``evaluation``
(Recall/HitRate, SPPMI, category recovery) and ``cli``.
"""

__version__ = "0.1.0"
