"""idoc-export: checkpoint-to-embedding bridge for the docspot engine."""

__version__ = "0.1.0"
