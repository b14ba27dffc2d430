"""Simulator for GEMM on processing-in-memory units under XOR DRAM address mappings."""

__version__ = "0.1.0"
