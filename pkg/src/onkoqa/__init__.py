"""Toolkit for German tumor-diagnosis coding: catalogue ingestion, instruction
dataset generation, endpoint evaluation, data-quality analysis and a mock
coding oracle for end-to-end tests."""

__version__ = "0.1.0"
