"""qfit: scan-specific unsupervised parameter estimation for quantitative MRI.

A small numpy/scipy laboratory for training per-dataset convolutional
networks that map multi-contrast image stacks to tissue-parameter maps by
enforcing signal-model consistency, together with the classical baselines
(variable-projection and log-linear decay fitting, dictionary matching) and
the synthetic-data machinery (phantoms, EPG simulation, noise, retrospective
undersampling) needed to evaluate them.
"""

__version__ = "0.1.0"
