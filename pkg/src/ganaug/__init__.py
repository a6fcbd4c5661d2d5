"""Staged GAN training over mixed labelled/unlabelled MR slices with a full
synthesis-to-segmentation pipeline, verified end to end on a phantom cohort."""

from . import data, errors, gan, metrics, phantom, phases, segmenter, synth

__version__ = "0.1.0"

__all__ = ["data", "errors", "gan", "metrics", "phantom", "phases",
           "segmenter", "synth", "__version__"]
