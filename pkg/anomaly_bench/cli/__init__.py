import sys

from .commands import build_parser, execute


def main():
    sys.exit(execute())


__all__ = ["build_parser", "execute", "main"]
