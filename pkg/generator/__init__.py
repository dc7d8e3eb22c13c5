"""Synthetic preference data with controlled evidence placement."""
