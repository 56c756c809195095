"""Numerical engine, detector, GAN networks and training pipeline."""
