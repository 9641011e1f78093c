"""Short-horizon vehicle position forecasting from GPS, IMU and CAN streams."""

__version__ = "0.1.0"
