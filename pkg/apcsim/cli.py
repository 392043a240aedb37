"""
Command line entry point.
Usage: apcsim [--env NAME] {train|calibrate|eval|noise-bits|optimize|search|sweep} --config FILE
"""

import click

from .config import load_environment


def create_cli() -> click.Group:
    @click.group()
    @click.option("--env", "env_name", default=None, help="Load .env.NAME instead of .env")
    def cli(env_name):
        """Noise-limited analog inference simulator and energy allocation optimizer."""
        load_environment(env_name)

    # Register commands
    from .commands import COMMANDS
    for command in COMMANDS:
        cli.add_command(command)

    return cli


cli = create_cli()


def main():
    cli(prog_name="apcsim")


if __name__ == "__main__":
    main()
