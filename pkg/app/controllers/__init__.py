# app/controllers/__init__.py
# Command-line interface of the toolkit
#
# Commands are grouped by area, one module each:
# - world_controller.py : worldgen
# - stage_controller.py : stage1, distill, stage3, edit-preview
# - eval_controller.py  : eval, oracle
# - run_controller.py   : run (full pipeline, multi-seed)
#
# Exit codes: 0 success, 2 validation error, 3 numerical failure, 1 otherwise.

import click

from app import __version__
from app.controllers.eval_controller import eval_command, oracle_command
from app.controllers.run_controller import run_command
from app.controllers.stage_controller import distill_command, edit_preview_command, stage1_command, stage3_command
from app.controllers.world_controller import worldgen_command


@click.group()
@click.version_option(version=__version__, prog_name='disco3d')
def cli():
    """disco3d: desk-scale multi-view consistent 3D scene editing"""


for command in (worldgen_command, stage1_command, distill_command, stage3_command,
                edit_preview_command, eval_command, oracle_command, run_command):
    cli.add_command(command)
