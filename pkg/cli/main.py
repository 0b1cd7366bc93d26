"""
Main CLI entry point that registers all command modules.
"""
import logging

import click
import coloredlogs
from dotenv import load_dotenv

from cli.context import ScenarioContext
from cli.commands.map_bench_cmd import map_bench
from cli.commands.plan_bench_cmd import plan_bench
from cli.commands.run_cmd import run
from cli.commands.oracle_cmd import oracle_check

# Load .env file at startup
load_dotenv()

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


@click.group()
@click.option('--log-level', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              help='Logging verbosity.')
@click.pass_context
def cli(ctx, log_level: str):
    """dynreach: particle occupancy mapping and sampling-based reaching among moving obstacles."""
    coloredlogs.install(level=log_level.upper(), logger=logging.getLogger(), fmt=LOG_FORMAT)
    ctx.obj = ScenarioContext()


cli.add_command(map_bench)
cli.add_command(plan_bench)
cli.add_command(run)
cli.add_command(oracle_check)


if __name__ == '__main__':
    cli()
