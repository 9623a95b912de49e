from dsmrf import db


class Run(db.Model):
    """
    One CLI invocation: the command, the config text it ran with and how it
    ended. The CSV on disk stays the primary output; the ledger keeps a
    queryable history of what was computed.
    """
    __tablename__ = 'runs'

    id = db.Column(db.Integer, primary_key=True)

    # e.g. "theory", "memorize"
    command = db.Column(db.String(32), nullable=False)

    config_text = db.Column(db.Text, nullable=False, default='')
    # stored as text: SQLite integers are signed 64-bit
    seed = db.Column(db.String(20), nullable=False)
    workers = db.Column(db.Integer, nullable=False, default=1)
    out_path = db.Column(db.String(1024), nullable=True)

    # running -> ok | partial | failed
    status = db.Column(db.String(16), nullable=False, default='running')
    n_rows = db.Column(db.Integer, nullable=False, default=0)
    n_failed = db.Column(db.Integer, nullable=False, default=0)

    created_at = db.Column(db.DateTime, server_default=db.func.now())

    curve_points = db.relationship(
        'CurvePoint',
        back_populates='run',
        lazy='dynamic',
        cascade="all, delete-orphan"
    )

    memorization_cells = db.relationship(
        'MemorizationCell',
        back_populates='run',
        lazy='dynamic',
        cascade="all, delete-orphan"
    )

    def __repr__(self):
        return f"<Run {self.id} {self.command} {self.status}>"


class CurvePoint(db.Model):
    """
    One learning-curve row (theory or Monte Carlo).
    """
    __tablename__ = 'curve_points'

    id = db.Column(db.Integer, primary_key=True)
    regime = db.Column(db.String(16), nullable=False)
    t = db.Column(db.Float, nullable=False)
    psi_n = db.Column(db.Float, nullable=False)
    psi_p = db.Column(db.Float, nullable=False)
    psi_D = db.Column(db.Float, nullable=False)
    lam = db.Column(db.Float, nullable=False)
    m = db.Column(db.Integer, nullable=True)
    d = db.Column(db.Integer, nullable=True)

    # NULL for failed points
    eps_test_total = db.Column(db.Float, nullable=True)
    eps_train = db.Column(db.Float, nullable=True)

    status = db.Column(db.String(16), nullable=False, default='ok')
    message = db.Column(db.Text, nullable=True)

    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False)
    run = db.relationship('Run', back_populates='curve_points')

    def __repr__(self):
        return f"<CurvePoint {self.regime} t={self.t:g} psi_p={self.psi_p:g}>"


class MemorizationCell(db.Model):
    """
    Memorization rate of one (psi_n, psi_p, m) cell.
    """
    __tablename__ = 'memorization_cells'

    id = db.Column(db.Integer, primary_key=True)
    psi_n = db.Column(db.Float, nullable=False)
    psi_p = db.Column(db.Float, nullable=False)
    m = db.Column(db.Integer, nullable=False)
    rate = db.Column(db.Float, nullable=True)
    std_err = db.Column(db.Float, nullable=True)
    n_diverged = db.Column(db.Integer, nullable=False, default=0)
    status = db.Column(db.String(16), nullable=False, default='ok')

    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False)
    run = db.relationship('Run', back_populates='memorization_cells')

    def __repr__(self):
        return f"<MemorizationCell psi_n={self.psi_n:g} psi_p={self.psi_p:g} m={self.m}>"
