"""Procedural sim/real scene generation and dataset I/O."""
