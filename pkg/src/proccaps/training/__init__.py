"""Losses, progression schedule, optimizer and training loops."""
