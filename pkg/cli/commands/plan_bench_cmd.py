"""
Planning benchmark command: seeded closed-loop reaching episodes.
"""
import click

from cli.context import pass_scenario_ctx, ScenarioContext
from cli.utils import abort_on_error, prepare_output_dir, echo_styled, echo_summary
from harness import run_suite


@click.command('plan-bench')
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False, readable=True))
@click.option('--output-dir', default=None, type=click.Path(file_okay=False, writable=True),
              help='Directory for summary.json, episodes.csv and timing.json.')
@click.option('--seed', type=int, default=None, help='Run a single episode with this seed.')
@click.option('--baseline', is_flag=True, help='Plan with obstacles assumed static and certain.')
@pass_scenario_ctx
@abort_on_error
def plan_bench(ctx: ScenarioContext, config_path: str, output_dir: str, seed: int, baseline: bool):
    """Run the reaching suite and report success rate, execution time and path length."""
    mode = "baseline" if baseline else "dynamic"
    config = ctx.init_from_config_path(config_path, output_dir, seed, subdir=mode)
    echo_styled(f"--- Planning benchmark '{config.name}' ({mode}) over {len(ctx.seeds)} seed(s) ---", "header")
    prepare_output_dir(ctx.output_dir)

    with click.progressbar(length=len(ctx.seeds), label='Episodes') as bar:
        report = run_suite(config, ctx.seeds, "plan", baseline if baseline else None, ctx.output_dir, bar.update)

    summary = report.summary()
    style = "success" if summary["success_rate"] == 1.0 else "warning"
    echo_styled(f"Success rate {summary['success_rate']:.2f} ({summary['collisions']} collisions, "
                f"{summary['timeouts']} timeouts)", style)
    echo_summary(summary, ["mean_execution_time", "mean_path_length"])
    echo_styled(f"Results written to '{ctx.output_dir}'.", "info")
