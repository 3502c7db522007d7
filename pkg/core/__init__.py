"""Core module for rigidtrack: geometry, track data, Procrustes, rigidity and gradients."""
