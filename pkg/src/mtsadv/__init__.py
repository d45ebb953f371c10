"""Adversarial attacks on multivariate time-series classifiers.

Attacked models are 1-NN DTW and a fully convolutional network. A LeNet-5
student is distilled from the attacked model and a gradient-conditioned
transformation network learns to produce targeted perturbations.
"""

__version__ = "0.1.0"
