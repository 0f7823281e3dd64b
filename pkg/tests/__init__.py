"""
Unit tests for pudding.

Each test_*.py module covers the source module of the same name;
tests/integration/ drives the `pudding` CLI end to end.
"""
