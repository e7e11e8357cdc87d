"""``python -m sps_bb84`` dispatches to the command-line front end."""

from .cli import entrypoint

entrypoint()
