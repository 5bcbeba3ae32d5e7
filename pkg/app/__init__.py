"""
ShortFT lab: reward fine-tuning of a toy diffusion model through shortcut chains
"""

__version__ = "1.0.0"
