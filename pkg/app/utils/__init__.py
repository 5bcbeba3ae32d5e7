"""
Autodiff tape, random streams, optimizer and toy datasets
"""
