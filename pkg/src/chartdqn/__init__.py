"""Deep Q-learning on binary stock-chart images, with portfolio backtests."""

__version__ = "0.1.0"
