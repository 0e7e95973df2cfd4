"""Cooperative detection of cyclist starting movements from camera and smart-device data."""

__version__ = "0.1.0"
