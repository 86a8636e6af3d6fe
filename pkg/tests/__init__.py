"""Tests for tensorar."""
