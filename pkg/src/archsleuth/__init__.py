"""DNN architecture recovery from simulated GPU memory-bus traces."""

__version__ = "0.1.0"
