"""Cycle-consistent deformable registration of 3D volume pairs."""

__version__ = "0.1.0"
