"""
Command modules; each defines one click command registered by `create_cli`.
"""

from .calibrate import calibrate_cmd
from .evaluate import eval_cmd
from .noise_bits import noise_bits_cmd
from .optimize import optimize_cmd
from .search import search_cmd
from .sweep import sweep_cmd
from .train import train_cmd

COMMANDS = [train_cmd, calibrate_cmd, eval_cmd, noise_bits_cmd, optimize_cmd, search_cmd, sweep_cmd]
