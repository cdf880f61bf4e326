"""Fetal birth weight estimation from paired head/abdomen 3D ultrasound volumes."""

__version__ = "0.1.0"
