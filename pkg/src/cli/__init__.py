# CLI Package
"""Command-line experiment runner."""
