"""MOS prediction heads with SWAG model averaging and influence-based data debugging."""

__version__ = "0.1.0"
