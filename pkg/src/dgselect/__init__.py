"""Regularised ERM, domain-wise model selection and Rademacher bounds for domain generalisation."""

__version__ = "0.1.0"
