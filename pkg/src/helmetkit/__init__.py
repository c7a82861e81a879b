"""Non-neural machinery for helmet-violation detection pipelines.

Annotation I/O, detection metrics, frame sampling, genetic hyperparameter
search and detection fusion.
"""

__version__ = "0.1.0"
