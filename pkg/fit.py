#!/usr/bin/env python3
"""Convenience shim, delegates to atlas_toolkit.cli.main()."""

from atlas_toolkit.cli import main

if __name__ == "__main__":
    main()
