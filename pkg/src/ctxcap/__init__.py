"""Context-aware dense region captioning at desk scale.

Region features are aggregated over a spatial/appearance neighbor graph,
fed to a stacked coarse-to-fine LSTM captioner with auxiliary attribute
supervision, and scored with a joint IoU/METEOR average-precision harness.
"""

__version__ = "0.1.0"
