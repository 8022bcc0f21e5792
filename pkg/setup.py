#!/usr/bin/env python3
"""
setup.py for arraycal

Note: All configuration is in pyproject.toml. This file provides compatibility
for older pip versions.
"""

from setuptools import setup

setup()
