"""Single-model brain lesion and anatomy segmentation from datasets with
disjoint label sets, trained with the adaptive cross entropy loss."""

__version__ = "0.1.0"
