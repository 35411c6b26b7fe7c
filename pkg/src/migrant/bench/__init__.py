"""Benchmark tools and the latency statistics pipeline."""
