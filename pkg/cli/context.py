"""
CLI Context module for sharing the loaded scenario and output location across commands.
"""
import os
from typing import List, Optional

import click

from config import ScenarioConfig, load_config
from utils import get_output_root


class ScenarioContext:
    """Context object for sharing state between CLI commands."""

    def __init__(self):
        self.config: Optional[ScenarioConfig] = None
        self.config_path: str = ""
        self.output_dir: str = ""
        self.seeds: List[int] = []

    def init_from_config_path(self, config_path: str, output_dir: Optional[str] = None,
                              seed: Optional[int] = None, subdir: str = "") -> ScenarioConfig:
        """Loads the scenario and resolves the output directory and seed list.

        Without an explicit output directory, results go to <output root>/<scenario name>[/<subdir>].
        """
        self.config_path = config_path
        self.config = load_config(config_path)
        if output_dir:
            self.output_dir = output_dir
        else:
            self.output_dir = os.path.join(get_output_root(), self.config.name, subdir)
        self.seeds = self.config.seed_list(seed)
        return self.config


pass_scenario_ctx = click.make_pass_decorator(ScenarioContext, ensure=True)
