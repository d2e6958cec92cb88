"""Ensemble self-training for unsupervised domain adaptation in semantic segmentation.

One shared encoder feeds three classifiers, each trained on a different
translation of the labeled source images. A sparse multinomial logistic
regression meta-learner fuses their per-pixel outputs, generates pseudo-labels
for the unlabeled target domain by confidence thresholding, and the whole
network is retrained over self-training rounds. Runs end to end on a
procedurally generated benchmark; no external data or frameworks required.
"""

__version__ = "0.1.0"
