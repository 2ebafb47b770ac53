from flask_sqlalchemy import SQLAlchemy
from datetime import datetime
import json
import logging
import os

db = SQLAlchemy()

logger = logging.getLogger(__name__)


class Run(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(40), nullable=False)
    seed = db.Column(db.Integer, nullable=True)
    config_hash = db.Column(db.String(64), nullable=True)
    out_dir = db.Column(db.String(255), nullable=True)
    exit_code = db.Column(db.Integer, nullable=False, default=0)
    manifest = db.Column(db.Text, nullable=True)  # JSON string of the run manifest
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    # Relationships
    models = db.relationship('TrainedModel', backref='run', lazy=True, cascade='all, delete-orphan')

    def __repr__(self):
        return f'<Run {self.id} {self.command}>'

    def get_manifest(self):
        """Parse manifest JSON string"""
        if self.manifest:
            try:
                return json.loads(self.manifest)
            except json.JSONDecodeError:
                return {}
        return {}

    def set_manifest(self, manifest_dict):
        """Set manifest as JSON string"""
        self.manifest = json.dumps(manifest_dict, sort_keys=True)

    def to_dict(self, include_models=False):
        data = {
            'id': self.id,
            'command': self.command,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'out_dir': self.out_dir,
            'exit_code': self.exit_code,
            'manifest': self.get_manifest(),
            'created_at': self.created_at.isoformat() if self.created_at else None
        }
        if include_models:
            data['models'] = [model.to_dict(include_payload=False) for model in self.models]
        return data


class TrainedModel(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('run.id'), nullable=False)
    kind = db.Column(db.String(20), nullable=False)  # params, gp_bank, baseline
    terrain = db.Column(db.String(80), nullable=True)
    payload = db.Column(db.Text, nullable=False)  # JSON string, same layout as the model files
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f'<TrainedModel {self.id} {self.kind}>'

    def get_payload(self):
        """Parse payload JSON string"""
        if self.payload:
            try:
                return json.loads(self.payload)
            except json.JSONDecodeError:
                return {}
        return {}

    def set_payload(self, payload_dict):
        """Set payload as JSON string"""
        self.payload = json.dumps(payload_dict, sort_keys=True)

    def to_dict(self, include_payload=True):
        data = {
            'id': self.id,
            'run_id': self.run_id,
            'kind': self.kind,
            'terrain': self.terrain,
            'created_at': self.created_at.isoformat() if self.created_at else None
        }
        if include_payload:
            data['payload'] = self.get_payload()
        return data


def registry_uri(uri):
    """The registry URI, or an in-memory database when the registry is disabled"""
    if not uri or str(uri).lower() == 'none':
        return 'sqlite:///:memory:'
    if uri.startswith('sqlite:///') and not uri.endswith(':memory:'):
        os.makedirs(os.path.dirname(os.path.abspath(uri[len('sqlite:///'):])), exist_ok=True)
    return uri


def init_registry(app):
    # Database configuration
    app.config['SQLALCHEMY_DATABASE_URI'] = registry_uri(app.config.get('REGISTRY_URI'))
    app.config['SQLALCHEMY_TRACK_MODIFICATIONS'] = False
    db.init_app(app)

    # Create database tables
    with app.app_context():
        db.create_all()
    return app


def record_run(app, command, manifest, exit_code, models=()):
    """
    Store a run and its trained artefacts; models is a sequence of
    (kind, terrain, payload). Returns the run id, or None when the
    registry write fails.
    """
    try:
        with app.app_context():
            run = Run(
                command=command,
                seed=manifest.get('seed'),
                config_hash=manifest.get('config_hash'),
                out_dir=manifest.get('out_dir'),
                exit_code=exit_code
            )
            run.set_manifest(manifest)
            db.session.add(run)
            db.session.flush()  # Get the run ID
            for kind, terrain, payload in models:
                model = TrainedModel(run_id=run.id, kind=kind, terrain=terrain)
                model.set_payload(payload)
                db.session.add(model)
            db.session.commit()
            return run.id
    except Exception as e:
        logger.warning('Run registry write failed: %s', e)
        return None
