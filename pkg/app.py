"""
Simply imports the command-line app from src/r3_captioner/cli.py
and runs it.
"""

from r3_captioner.cli import app

if __name__ == "__main__":
    app()
