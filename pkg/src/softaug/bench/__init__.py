"""Experiment harness: config, training orchestration, evaluation, CLI."""
