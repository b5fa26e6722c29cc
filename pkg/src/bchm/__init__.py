"""Boundary-condition calibration toolkit."""
