"""Perioperative phase duration prediction from hospital event logs.

Pipeline: parse event logs into cases, extract induction / preparation /
procedure durations, clean them, cluster free-text descriptions, encode
features, fit duration models and compare them against the manual plan.
"""

__version__ = "0.1.0"
