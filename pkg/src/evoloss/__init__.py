"""Loss-function evolution for multi-task, multi-modal self-supervised learning."""

__version__ = "0.1.0"
