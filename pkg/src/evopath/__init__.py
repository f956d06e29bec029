"""Policy transfer along learned paths through an evolution-parameter cube."""

__version__ = "0.1.0"
