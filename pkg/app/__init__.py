"""Knowledge-inherited neural architecture search package."""

from .config import Settings

__all__ = ["Settings"]
