"""Knowledge-enriched, group-wise visual storytelling at desk scale."""

__version__ = "0.1.0-alpha"


__all__ = ["__version__"]
