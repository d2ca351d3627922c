"""Command-line interface for recurrent-windows.

Core commands:
  train     - Fine-tune a model from a TOML run file
  eval      - Perplexity CSV rows for one checkpoint
  sweep     - Perplexity/FLOPs curves over window sizes and overlaps
  flops     - FLOPs-per-token table
  generate  - Greedy continuation of a prompt
  gen-data  - Write a synthetic topic-marker corpus
  runs      - List runs recorded in an output directory's ledger
"""

import logging

import click
from dotenv import load_dotenv

logger = logging.getLogger(__name__)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
def main(verbose: bool):
    """Window-level recurrence for decoder-only transformer language models."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    load_dotenv()


from .cli_commands import register_commands  # noqa: E402

register_commands(main)


if __name__ == "__main__":
    main()
