"""Contention-aware simulation of desynchronization in bulk-synchronous MPI programs."""
__version__ = "0.1.0"
