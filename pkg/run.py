from dotenv import load_dotenv
from flask.cli import FlaskGroup

# config.py reads os.environ at import time
load_dotenv()

from config import Config  # noqa: E402
from dsmrf import create_app  # noqa: E402


def make_app():
    return create_app(Config)


cli = FlaskGroup(create_app=make_app, add_default_commands=False, load_dotenv=False,
                 help='Learning curves and memorization of random-features score models.')

if __name__ == '__main__':
    cli()
