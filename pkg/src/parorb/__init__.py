"""Orbital-parallel minimization of a real-space Kohn-Sham model energy."""

__version__ = "0.1.0"
