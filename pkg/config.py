import os


def _flag(name, default):
    return os.environ.get(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get('DATABASE_URL') or 'sqlite:///dsmrf_runs.db'
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # RUN LEDGER
    LEDGER_ENABLED = _flag('DSMRF_LEDGER', '1')

    LOG_LEVEL = os.environ.get('DSMRF_LOG_LEVEL', 'INFO').upper()
    # largest Monte Carlo point allowed by RunConfig.check
    MEMORY_BUDGET_MB = int(os.environ.get('DSMRF_MEMORY_BUDGET_MB', '4096'))


class TestConfig(Config):
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite://'
    LEDGER_ENABLED = True
    LOG_LEVEL = 'WARNING'
