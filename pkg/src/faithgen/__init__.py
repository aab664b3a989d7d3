"""Faithful table-to-text generation toolkit.

A toy-scale transformer with a copy mechanism trained under a three-part
objective (likelihood, table-text embedding disagreement, optimal-transport
content matching), plus matching solvers and the PARENT-T faithfulness
metric, all built for desk-scale verification.
"""

__version__ = "0.1.0"
