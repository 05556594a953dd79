"""Desk-scale continual relation learning lab.

Trains a lightweight relation extractor over a sequence of tasks with
curriculum-meta learning and baseline strategies, embeds relations from a
knowledge graph to drive the curriculum, and measures order sensitivity of
the resulting continual learner.
"""

__version__ = "0.1.0"
