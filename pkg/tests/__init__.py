"""
Harborsight Test Suite

Unit tests cover one module each; integration tests cover workflows across modules.
"""
