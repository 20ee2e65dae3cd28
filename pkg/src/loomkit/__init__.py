"""loomkit: event-camera and time-to-contact toolkit.

Subpackages cover event stream processing (``events``), camera geometry
(``geometry``), closed-form TTC relations (``ttc``), Kalman tracking and
TTC annotation (``tracking``), runtime TTC estimators (``estimators``),
BEV view-transform geometry (``bev``), the evaluation suite
(``metrics``), and the synthetic looming oracle (``synth``).
"""

__version__ = "0.1.0"

from . import bev, errors, estimators, events, geometry, metrics, synth, tracking, ttc

__all__ = [
    "bev", "errors", "estimators", "events", "geometry",
    "metrics", "synth", "tracking", "ttc", "__version__",
]
