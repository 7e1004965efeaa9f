"""Module entry point so ``python -m chae`` behaves like the ``chae`` script."""

from .cli import main

main()
