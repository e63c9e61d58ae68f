"""Micro-orchestration of an FFT function across an emulated FPGA SoC."""

__version__ = "0.1.0"
