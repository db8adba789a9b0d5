#!/usr/bin/env python3
"""
Command-line entry point for the casual-video SLAM backend.

    python slam.py {simulate,run,eval,focal} ...

The process exit code is the one chosen by ``src.cli.main``: 0 on success,
2 for usage errors, 3 for bad input data and 4 for numerical failures.
"""

import sys
import os

# Project root for ``src.*``; src/ for the modules' absolute-import fallback
project_root = os.path.dirname(os.path.abspath(__file__))
for path in (os.path.join(project_root, 'src'), project_root):
    if path not in sys.path:
        sys.path.insert(0, path)

if __name__ == "__main__":
    try:
        from src.cli import main
    except ImportError as e:
        print(f"❌ Cannot load the SLAM backend: {e}")
        print("Install the stack first: pip install -r requirements.txt")
        sys.exit(1)
    sys.exit(main())
