"""Roadside LiDAR vehicle classification with few-shot vision-language prompting."""

__version__ = "0.1.0"
