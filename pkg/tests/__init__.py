"""Test suite for oil & gas futures pipeline."""
