"""Motor-unit decomposition of high-density surface EMG by progressive FastICA peel-off.

Offline: :func:`run_apfp`. Online: :func:`curate_bank` then :func:`run_stream`.
Ground truth: :class:`Scenario`. Scoring: :func:`evaluate`.
"""

from .apfp import ApfpConfig, DecompositionResult, run_apfp
from .core import MuapTemplateSet, Recording, SpikeTrain
from .evaluation import decomposability, evaluate
from .online import OnlineConfig, VectorBank, batch_decode, curate_bank, run_stream
from .simulator import Scenario, SimConfig

__all__ = [
    "ApfpConfig", "DecompositionResult", "run_apfp", "MuapTemplateSet", "Recording", "SpikeTrain",
    "decomposability", "evaluate", "OnlineConfig", "VectorBank", "batch_decode", "curate_bank", "run_stream",
    "Scenario", "SimConfig",
]
