#!/usr/bin/env python
"""
dynreach CLI - mapping and planning benchmarks for a robot arm among moving obstacles.

This is a thin wrapper around the modular CLI structure defined in the cli/ package.
"""

from cli.main import cli

if __name__ == "__main__":
    cli()
