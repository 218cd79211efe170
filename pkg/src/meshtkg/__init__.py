"""Temporal knowledge graph reasoning with dual structural/semantic
encoders, event-aware expert gating, and a time-aware evaluation protocol.
"""

__version__ = "0.1.0"
