"""Services module for rigidtrack: fitting, clustering, evaluation, export and runs."""
