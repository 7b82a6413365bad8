"""Hourly retail pricing and wholesale procurement planning for EV charging
operators with on-site storage and renewables."""

__version__ = "0.1.0"
