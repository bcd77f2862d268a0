"""Learning and analysing instruction clarification request policies in CoDraw."""

__version__ = "0.1.0"
