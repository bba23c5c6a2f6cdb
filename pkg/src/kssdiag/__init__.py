"""Generalized zero-shot fault diagnosis toolkit.

Trains an attribute-guided sample generator on seen fault classes, uses it
to synthesize samples of unseen classes from their attribute signatures,
and gates test samples between a seen-class classifier and an
attribute-based fallback in the knowledge space.
"""

__version__ = "0.1.0"
