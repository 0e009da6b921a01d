# commands/__init__.py - Command registration
from .analysis_commands import register_analysis_commands
from .model_commands import register_model_commands
from .planning_commands import register_planning_commands


def register_all_commands(subparsers, common):
    """Register all subcommands; `common` is the parent parser of the shared flags"""
    register_planning_commands(subparsers, common)
    register_model_commands(subparsers, common)
    register_analysis_commands(subparsers, common)
