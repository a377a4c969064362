"""Desk-scale lazy decoder-only generative recommender.

Subpackages:
  autodiff   reverse-mode differentiation over float64 numpy arrays
  model      the lazy decoder (shared-KV cross-attention, GQA, MoE), loss, beam search
  costmodel  closed-form FLOPs/activation accounting for three architectures
  reward     duration-aware reward shaping from watch-time feedback
  policy     gradient-bounded and clipped policy-optimization objectives
  sim        deterministic synthetic catalog, users, and feedback streams
  experiments / cli   configuration-driven training and reporting runs
"""

__version__ = "0.1.0"
