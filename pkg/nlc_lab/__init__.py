# -*- coding: utf-8 -*-

"""Top-level package for the noise level correction lab."""

__author__ = """Devon Bray"""
__email__ = "dev@esologic.com"
__version__ = "0.1.0"
