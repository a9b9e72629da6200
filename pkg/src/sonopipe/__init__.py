"""sonopipe: desk-scale sonotype classification pipeline.

Submodules:
    ingest      WAV + annotation parsing, adjacency merging
    spectro     spectrograms, byte-range normalization, ROI encoding
    augment     label-preserving augmentation of encoded samples
    dataset     catalog, splits, experiment draws, container format
    nnet        dual-input CNN with manual gradients and early stopping
    evalstat    metrics (accuracy, mAP/cmAP, AUC, ...) and statistics
    synth       synthetic soundscape benchmark generator
    experiments replicated experiment designs and factor ANOVA
    cli         command-line driver
"""

__version__ = "0.1.0"

from . import (augment, cli, container, dataset, evalstat, experiments, ingest,
               nnet, special, spectro, synth)

__all__ = ["augment", "cli", "container", "dataset", "evalstat", "experiments",
           "ingest", "nnet", "special", "spectro", "synth", "__version__"]
