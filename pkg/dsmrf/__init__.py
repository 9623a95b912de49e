import logging
import sys

from flask import Flask
from flask_sqlalchemy import SQLAlchemy

# Initialize the database extension (run ledger)
db = SQLAlchemy()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'


def create_app(config_class):
    app = Flask(__name__)
    app.config.from_object(config_class)

    # stderr only: CSV output must stay clean
    logging.basicConfig(level=app.config['LOG_LEVEL'], format=LOG_FORMAT, stream=sys.stderr)

    db.init_app(app)

    from dsmrf.cli import main as main_blueprint
    app.register_blueprint(main_blueprint)

    if app.config['LEDGER_ENABLED']:
        with app.app_context():
            db.create_all()

    return app


from dsmrf import models
