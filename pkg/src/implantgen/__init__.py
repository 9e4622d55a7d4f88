"""Coarse-to-fine cranial implant prediction on binary skull voxel grids."""

__version__ = "0.1.0"
