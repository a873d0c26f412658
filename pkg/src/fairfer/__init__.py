"""Age-group fairness analysis for facial expression recognition.

Dataset manifests with age annotation, age-aware loss weighting, a
preprocessing pipeline, four model variants, cross-validated training,
per-age-group metrics, and aggregated saliency heatmaps, plus a synthetic
benchmark that reproduces age bias at desk scale.
"""

__version__ = "0.1.0"
