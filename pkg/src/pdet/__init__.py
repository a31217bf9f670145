"""Windowed multi-scale transformer surrogates for 2D PDE data."""
