"""Embedded Runge-Kutta integrators with QR-based stiffness detection and IMEX switching."""

__version__ = "0.1.0"
