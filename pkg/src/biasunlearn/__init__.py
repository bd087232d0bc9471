"""Debiasing language models by unlearning stereotypes while retaining anti-stereotypes."""

__version__ = "0.1.0"
