"""Entry point for python -m recurrent_windows."""

from .cli import main

if __name__ == "__main__":
    main()
