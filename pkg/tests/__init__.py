"""Unit tests for meanode."""
