"""Benchmark harness: sequence replay, evaluation and synthetic scenarios."""

from .evaluate import EvalReport, GroundTruth, evaluate
