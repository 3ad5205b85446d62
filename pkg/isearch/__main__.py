"""
Interface for running isearch as `python -m isearch`

Everything is a click subcommand of cli.main; see `python -m isearch --help`
"""

from .cli import main

main(prog_name="isearch")
