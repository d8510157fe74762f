"""mplab: a desk-scale multi-agent particle-world laboratory."""

__version__ = "0.1.0"
