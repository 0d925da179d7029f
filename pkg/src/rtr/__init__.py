"""Streaming video restyler.

Trains a small flow-matching video transformer, distills it into a few-step
causal student, and serves the student frame by frame behind a rolling
anchored KV cache with live prompt/reference switching.
"""

__version__ = "0.1.0"
