import click

__version__ = "0.3.0"

if __name__ == "__main__":
    click.echo(__version__)
