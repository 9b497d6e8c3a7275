"""Prompt-conditioned decision transformer with rank-oracle prompt tuning.

Subpackages cover the full pipeline: a small autodiff core (`diffcore`),
synthetic multi-task control environments (`envs`), the trajectory data
model (`trajdata`), the transformer policy (`dtmodel`), multi-task
pretraining and full-model fine-tuning (`pretrain`), rank-based
zeroth-order prompt tuning (`zorank`), evaluation and ablation harnesses
(`evaluation`), a command line front end (`cli`), and an HTTP service for
human-in-the-loop candidate ranking (`rankserve`).
"""

__version__ = "0.1.0"
