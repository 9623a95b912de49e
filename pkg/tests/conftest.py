import numpy as np
import pytest

from config import TestConfig
from dsmrf import create_app, db


@pytest.fixture
def app():
    app = create_app(TestConfig)
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def rng():
    return np.random.default_rng(42)
