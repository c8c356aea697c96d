"""certattack: certify small classifiers, then attack the certificates.

Randomized-smoothing and interval-bound certification for small MLP/CNN
models, a certification-aware norm-minimizing attack, expectation-level
PGD / Carlini-Wagner / DeepFool baselines, and an experiment harness.
"""

__version__ = "0.1.0"
