"""
Single-episode command with full dumps.
"""
import click

from cli.context import pass_scenario_ctx, ScenarioContext
from cli.utils import abort_on_error, prepare_output_dir, echo_styled, echo_summary
from harness import SuiteReport, run_planning_episode


@click.command()
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False, readable=True))
@click.option('--output-dir', default=None, type=click.Path(file_okay=False, writable=True),
              help='Directory for diagnostics, voxel frames and clouds.')
@click.option('--seed', type=int, default=None, help='Episode seed (defaults to the first scenario seed).')
@pass_scenario_ctx
@abort_on_error
def run(ctx: ScenarioContext, config_path: str, output_dir: str, seed: int):
    """Run one closed-loop episode and dump planner diagnostics, voxel snapshots and clouds."""
    config = ctx.init_from_config_path(config_path, output_dir, seed, subdir="run")
    episode_seed = ctx.seeds[0]
    echo_styled(f"--- Episode '{config.name}' seed {episode_seed} ---", "header")
    prepare_output_dir(ctx.output_dir)

    metrics = run_planning_episode(config, episode_seed, output_dir=ctx.output_dir, dump_frames=True)
    report = SuiteReport(config.name, "baseline" if config.planner.baseline else "dynamic", [metrics])
    report.write(ctx.output_dir)

    echo_styled(f"Outcome: {metrics.outcome} after {metrics.steps} control steps",
                "success" if metrics.success else "warning")
    echo_summary(report.summary(), ["mean_execution_time", "mean_path_length"])
    echo_styled(f"Dumps written to '{ctx.output_dir}'.", "info")
