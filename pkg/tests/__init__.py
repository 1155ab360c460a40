"""Tests for MAS FaultLab."""
