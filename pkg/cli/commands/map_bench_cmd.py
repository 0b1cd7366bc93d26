"""
Mapping benchmark command: runs the particle map alone and scores it against ground truth.
"""
import os
import click

from cli.context import pass_scenario_ctx, ScenarioContext
from cli.utils import abort_on_error, prepare_output_dir, echo_styled, echo_summary
from harness import SuiteReport, run_mapping_benchmark


@click.command('map-bench')
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False, readable=True))
@click.option('--output-dir', default=None, type=click.Path(file_okay=False, writable=True),
              help='Directory for summary.json, episodes.csv and frame dumps.')
@click.option('--seed', type=int, default=None, help='Run a single episode with this seed.')
@click.option('--dump-frames', is_flag=True, help='Write per-frame voxel CSVs and XYZ clouds.')
@pass_scenario_ctx
@abort_on_error
def map_bench(ctx: ScenarioContext, config_path: str, output_dir: str, seed: int, dump_frames: bool):
    """Score occupancy (AUC, F1) and velocity RMSE of the map on a scripted scene."""
    config = ctx.init_from_config_path(config_path, output_dir, seed, subdir="map")
    echo_styled(f"--- Mapping benchmark '{config.name}' over {len(ctx.seeds)} seed(s) ---", "header")
    prepare_output_dir(ctx.output_dir)

    frames = int(round(config.duration / config.map.dt))
    episodes = []
    with click.progressbar(length=frames * len(ctx.seeds), label='Mapping frames') as bar:
        for s in ctx.seeds:
            frame_dir = os.path.join(ctx.output_dir, f"seed_{s}") if dump_frames else None
            episodes.append(run_mapping_benchmark(config, s, frame_dir, dump_frames, progress=bar.update))

    report = SuiteReport(config.name, "map", episodes)
    report.write(ctx.output_dir)
    echo_styled(f"Results written to '{ctx.output_dir}'.", "success")
    echo_summary(report.summary(), ["mean_auc", "mean_best_f1", "mean_velocity_rmse", "false_positives"])
