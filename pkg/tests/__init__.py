"""Tests for senseflow."""
