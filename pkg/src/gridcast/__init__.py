"""gridcast: desk-scale 4D occupancy forecasting and planning engine."""

__version__ = "0.1.0"
