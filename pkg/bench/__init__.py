"""Benchmarks, method comparisons, ablations and report writers."""
