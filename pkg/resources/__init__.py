"""Resources module for rigidtrack."""
