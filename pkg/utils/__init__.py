"""Utilities module for rigidtrack."""
