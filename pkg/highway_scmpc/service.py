"""
HTTP surface of the simulator.

Endpoints:
    GET  /health        solver, config, dataset and output checks (200 or 503)
    GET  /version       version string
    POST /api/simulate  closed-loop run of the posted config; returns summary and steps
    POST /api/predict   prediction-only run of the posted config; returns fan records

Usage:
    from highway_scmpc.service import create_app
    app = create_app('configs/case1.json')
    app.run(port=8000)
"""

import os
from typing import Optional

from dotenv import load_dotenv
from flasgger import Swagger
from flask import Flask, current_app, jsonify, request

from highway_scmpc.config import apply_env_overrides, load_config
from highway_scmpc.errors import (
    CollisionError, ScmpcError, bad_request, internal_server_error, not_found,
    problem_response, unprocessable_entity,
)
from highway_scmpc.simulation import run_closed_loop, run_predict, step_records
from highway_scmpc.structured_logger import (
    get_logger, setup_request_correlation, setup_structured_logging,
)
from highway_scmpc.version import SERVICE_NAME, get_version

logger = get_logger(__name__)

_flaskenv_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                              '.flaskenv')

swagger_config = {
    'headers': [],
    'specs': [
        {
            'endpoint': 'apispec',
            'route': '/apispec.json',
            'rule_filter': lambda rule: True,
            'model_filter': lambda tag: True,
        }
    ],
    'static_url_path': '/flasgger_static',
    'swagger_ui': True,
    'specs_route': '/docs'
}


def _experiment_from_request():
    body = request.get_json(silent=True)
    if not isinstance(body, dict):
        return None, None
    body = dict(body)
    seed = body.pop('seed', None)
    duration = body.pop('duration', None)
    cfg = apply_env_overrides(load_config(body))
    if seed is not None:
        cfg.simulation.seed = int(seed)
    return cfg, duration


def _register_errors(app: Flask):
    @app.errorhandler(CollisionError)
    def handle_collision(e):
        logger.error('Run aborted on collision', extra={'detail': e.detail})
        return problem_response(e, forensics=e.forensics)

    @app.errorhandler(ScmpcError)
    def handle_library_error(e):
        return problem_response(e)

    @app.errorhandler(400)
    def handle_bad_request(e):
        return bad_request(detail=str(e))

    @app.errorhandler(404)
    def handle_not_found(e):
        return not_found(detail=str(e))

    @app.errorhandler(500)
    def handle_internal_error(e):
        logger.error(f'Internal server error: {e}')
        return internal_server_error()

    @app.errorhandler(Exception)
    def handle_unexpected_error(e):
        logger.exception(f'Unexpected error: {e}')
        return internal_server_error(detail='An unexpected error occurred')


def _register_routes(app: Flask):
    @app.route('/health')
    def health():
        """
        Health check.
        ---
        responses:
          200:
            description: All checks passing
          503:
            description: Unhealthy or degraded
        """
        from health_check import HealthChecker

        checker = HealthChecker(service_name=SERVICE_NAME,
                                config_path=current_app.config.get('SCMPC_CONFIG'))
        return checker.get_health()

    @app.route('/version')
    def version():
        """
        Service version.
        ---
        responses:
          200:
            description: Version string of the running checkout
        """
        return jsonify({'service': SERVICE_NAME, 'version': get_version()})

    @app.route('/api/simulate', methods=['POST'])
    def simulate():
        """
        Run a closed-loop simulation.
        ---
        parameters:
          - in: body
            name: body
            description: Experiment config document; optional `seed` and `duration`
            required: true
            schema:
              type: object
        responses:
          200:
            description: Run summary and one record per control step
          422:
            description: Invalid configuration
          500:
            description: Collision or feasibility violation (problem details)
        """
        cfg, duration = _experiment_from_request()
        if cfg is None:
            return unprocessable_entity('request body must be a JSON experiment config')
        result = run_closed_loop(cfg, duration=duration)
        return jsonify({'summary': result.summary, 'steps': step_records(result.steps)})

    @app.route('/api/predict', methods=['POST'])
    def predict():
        """
        Run the traffic predictor alone.
        ---
        parameters:
          - in: body
            name: body
            description: Experiment config document; optional `seed` and `duration`
            required: true
            schema:
              type: object
        responses:
          200:
            description: Prediction fans per control tick
          422:
            description: Invalid configuration
        """
        cfg, duration = _experiment_from_request()
        if cfg is None:
            return unprocessable_entity('request body must be a JSON experiment config')
        return jsonify({'records': run_predict(cfg, duration=duration)})


def create_app(config_path: Optional[str] = None) -> Flask:
    """
    Build the Flask application.

    Args:
        config_path: experiment config checked by /health; defaults to SCMPC_CONFIG
    """
    load_dotenv(_flaskenv_path)
    app = Flask(__name__)
    app.config['SERVICE_NAME'] = SERVICE_NAME
    app.config['SCMPC_CONFIG'] = config_path or os.environ.get('SCMPC_CONFIG')
    app.json.sort_keys = True

    setup_structured_logging()
    setup_request_correlation(app)
    _register_errors(app)
    _register_routes(app)

    swagger_template = {
        'info': {
            'title': f'{SERVICE_NAME} API',
            'description': 'Closed-loop highway simulation with interaction-aware prediction '
                           'and scenario MPC',
            'version': get_version(),
        }
    }
    Swagger(app, config=swagger_config, template=swagger_template)

    logger.info(f'{SERVICE_NAME} service started')
    return app
