import logging
import os

from flask import Flask, jsonify
from flask_cors import CORS
from werkzeug.exceptions import HTTPException

import config
from errors import DefenceError

logger = logging.getLogger(__name__)


def create_app(overrides=None):
    app = Flask(__name__)

    # Configuration
    app.config['MAX_CONTENT_LENGTH'] = config.max_upload_bytes()
    app.config['DEFENCE_MODEL_PATH'] = config.model_path()
    app.config['DEFENCE_THREADS'] = config.threads()
    app.config.update(overrides or {})

    CORS(app, resources={r"/api/*": {"origins": "*"}})

    from routes import eval_bp, flow_bp, fusion_bp, segment_bp

    app.register_blueprint(segment_bp, url_prefix='/api/segment')
    app.register_blueprint(flow_bp, url_prefix='/api/flow')
    app.register_blueprint(fusion_bp, url_prefix='/api/defence')
    app.register_blueprint(eval_bp, url_prefix='/api/eval')

    # Error handlers
    @app.errorhandler(DefenceError)
    @app.errorhandler(ValueError)
    def bad_input(error):
        return jsonify({'error': str(error)}), 400

    @app.errorhandler(HTTPException)
    def http_error(error):
        return jsonify({'error': error.description}), error.code

    @app.errorhandler(Exception)
    def internal_error(error):
        logger.exception("Unhandled error")
        return jsonify({'error': 'Internal server error'}), 500

    # Health check endpoint
    @app.route('/api/health')
    def health_check():
        return jsonify({
            'status': 'healthy',
            'message': 'De-fencing API is running',
            'model_loaded': bool(app.config['DEFENCE_MODEL_PATH']),
        })

    return app


if __name__ == "__main__":
    logging.basicConfig(level=config.log_level())
    port = int(os.environ.get('PORT', 5000))
    create_app().run(host="0.0.0.0", port=port, debug=False)
