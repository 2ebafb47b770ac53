import os
import sys
# DON'T CHANGE THIS !!!
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from flask import Flask, jsonify
from flask_cors import CORS
from werkzeug.exceptions import HTTPException
from src.config import load_config
from src.models.run import init_registry
from src.routes.runs import runs_bp
from src.routes.predict import predict_bp


def create_app(config=None):
    app = Flask(__name__)
    app.config.from_mapping(load_config())
    if config:
        app.config.from_mapping(config)

    # Enable CORS for all routes
    CORS(app, origins=['*'])

    # Register blueprints
    app.register_blueprint(runs_bp, url_prefix='/api')
    app.register_blueprint(predict_bp, url_prefix='/api')

    init_registry(app)

    # Health check endpoint
    @app.route('/api/health', methods=['GET'])
    def health_check():
        return jsonify({'status': 'healthy', 'message': 'Skid-steer motion model API is running'}), 200

    @app.errorhandler(404)
    def not_found(e):
        return jsonify({'error': 'Not found'}), 404

    @app.errorhandler(HTTPException)
    def http_error(e):
        return jsonify({'error': e.description}), e.code

    return app


app = create_app()

if __name__ == '__main__':
    app.run(host='0.0.0.0', port=5000, debug=True)
