"""Allow `python -m voicetrace` as an alias for the voicetrace command."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
