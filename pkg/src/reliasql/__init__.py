"""Abstention-aware text-to-SQL over EHR databases, with reliability scoring."""

__version__ = "0.1.0"
