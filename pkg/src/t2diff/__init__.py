"""Two-tower retrieval whose user tower reconstructs the next behavior by drift diffusion."""
__version__ = "0.1.0"
