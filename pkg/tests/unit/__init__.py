"""
Unit Tests for Harborsight Components

These tests verify individual modules in isolation:
- Numerics: tensor ops, gradients and the optimizer
- Radar: sampling, projection and the point encoder
- Fusion Attention: image encoder, cross-attention fusion and decoder
- Mask Ops: mask stacks, noise reduction and class assignment
- Prompt Masker and Inpaint Orchestrator: pseudo-masks and iterative inpainting
- Losses and Metrics: focal and dice losses, IoU accounting
- Synthetic Scenes, Corpus IO and Checkpoints: generated data and file formats
- Pipeline: the three stages, training and evaluation
- Run Config, Line Protocol and Report Generator: configuration, adapters and reports
"""
