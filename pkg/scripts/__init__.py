"""
ZeroSlide benchmark harness - Scripts Package

Lifelong-learning strategies for bagged-embedding classification: training-based
continual learners (EWC, DER++, BuRo rehearsal) and the training-free prototype
bank classifier, evaluated under CLASS-IL and TASK-IL.
"""

from .version import __version__
from .logger import get_logger
