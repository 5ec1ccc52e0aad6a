"""
Integration Tests for Harborsight Workflows

These tests verify component interactions and end-to-end workflows:
- Full Workflow: corpus → stage 1 → stage 2 → inpainting → stage 3 → report
- Command Line: gen → train → infer → eval and exit codes
- Experiments: ablation and comparison drivers on a tiny corpus
- Line Protocol: a live reference server behind the masker and inpainter adapters
"""
