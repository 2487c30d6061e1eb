"""
Unit tests for lglab
"""
