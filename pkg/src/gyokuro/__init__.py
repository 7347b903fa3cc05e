"""Source-assisted private membership testing with a simulated TEE."""

__version__ = "0.1.0"
