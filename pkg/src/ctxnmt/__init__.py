"""Context-aware transformer translation models and analysis tooling."""

__version__ = "0.1.0"
