"""Simulator and command-stack compiler for multi-node DRAM-PIM LLM decoding."""

__version__ = "0.1.0"
