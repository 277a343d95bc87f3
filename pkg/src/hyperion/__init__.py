"""Emulator of a storage-attached DPU that runs verified eBPF datapath programs."""

__version__ = "0.1.0"
