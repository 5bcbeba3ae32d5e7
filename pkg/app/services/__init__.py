"""
Training, distillation, alignment and experiment services
"""
