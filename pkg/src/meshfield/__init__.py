"""Mesh-scaffolded neural implicit field with geometry and texture editing."""

__version__ = "0.1.0"
