"""Continual learning with evolving mixture-of-LoRA-experts adapters on a frozen encoder.

Pure numpy: reverse-mode autodiff, AdamW, Top-p routed LoRA experts with
self-calibrated expansion and pruning, and prototype-based task routing at
inference time.
"""

__version__ = "0.1.0"
