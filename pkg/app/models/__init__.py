"""
Denoiser network, LoRA stacks and segment plans
"""
