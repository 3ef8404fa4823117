"""Desk-scale feature-aligned diffusion."""
