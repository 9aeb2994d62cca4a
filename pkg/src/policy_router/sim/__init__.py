"""Synthetic task universe, policies and benchmark runner."""
