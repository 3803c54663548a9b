"""promptvision: a prompt-driven image model that emits boxes, relevance
scores and text, with synthetic shape-world data and multitask training."""

__version__ = "0.1.0"
