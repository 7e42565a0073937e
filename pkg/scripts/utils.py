# scripts/utils.py
"""
Helpers shared by the maintenance scripts.
"""

import os
import sys


def get_project_root():
    """Root of the repository (parent of scripts/)."""
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def add_project_to_path():
    """Make `app` and `config` importable from a script run in place."""
    root = get_project_root()
    if root not in sys.path:
        sys.path.insert(0, root)
    return root
