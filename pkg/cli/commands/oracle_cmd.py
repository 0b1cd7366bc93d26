"""
Oracle equivalence command: batched kernels against their slow references.
"""
import click

from cli.utils import abort_on_error, echo_styled
from oracle import run_oracle_suite


@click.command('oracle-check')
@click.option('--instances', default=200, show_default=True, type=click.IntRange(min=1),
              help='Random instances per check.')
@click.option('--seed', default=0, show_default=True, type=int, help='Seed of the instance generator.')
@abort_on_error
def oracle_check(instances: int, seed: int):
    """Compare the batched filter update, covariance propagation and assignment with references."""
    echo_styled(f"--- Oracle checks ({instances} instances, seed {seed}) ---", "header")
    checks = run_oracle_suite(instances, seed)
    for check in checks:
        line = f"{check.name:<12} max error {check.max_error:.3e} (tolerance {check.tolerance:.0e})"
        echo_styled(line, "pass" if check.passed else "fail")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise click.ClickException(f"oracle mismatch: {', '.join(failed)}")
    echo_styled("All oracle checks passed.", "success")
