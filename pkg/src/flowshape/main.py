from __future__ import annotations
import logging

import click

from flowshape.commands import edit, evaluate, gen, maps, train
from flowshape.services.errors import FlowShapeError

log = logging.getLogger(__name__)

EXTENSIONS = (gen, train, edit, evaluate, maps)


class FlowShapeGroup(click.Group):
    """Turns library errors into a one-line message and the error's exit code."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except FlowShapeError as e:
            log.debug("command failed: %s", type(e).__name__, exc_info=True)
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)


@click.group(cls=FlowShapeGroup)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """Shape-aware image editing on a toy rectified flow."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


for extension in EXTENSIONS:
    extension.setup(cli)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
