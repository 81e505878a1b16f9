"""auxtrain: train vision models with a progressively ablated auxiliary
mask channel, demonstrated on cardiac phase matching and catheter tip
tracking over deterministic synthetic X-ray sequences.

Submodules
----------
synthgen    synthetic sequence generator and on-disk dataset format
ablation    the auxiliary-channel ablation operator and its schedule
nets        backbones: conv-LSTM and transformer phase encoders and trackers
objectives  triplet, heatmap, segmentation, multi-task, and MMD losses
trainer     the five training methods, checkpointing, and evaluation
metrics     matching / tracking metrics, paired t-tests, feature imaging
cli         batch entry point (``auxtrain <command> ...``)
"""

__version__ = "0.1.0"

from . import ablation, checkpoint, metrics, nets, objectives, synthgen, trainer  # noqa: F401
