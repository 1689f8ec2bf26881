"""
Structured JSON Logger with run correlation IDs for highway-scmpc

Every record carries the id of the closed-loop run (or HTTP request) that produced it,
so solver warnings, filter fallbacks and controller decisions from one experiment can be
pulled out of a shared log stream.

Usage in the CLI:
    from highway_scmpc.structured_logger import setup_structured_logging, run_context
    setup_structured_logging()
    with run_context('case1-seed7'):
        run_closed_loop(cfg)

Usage in library modules:
    logger = get_logger(__name__)
    logger.warning('Hessian regularized', extra={'lambda': 1e-9, 'n': 60})
"""

import contextvars
import json
import logging
import os
import uuid
from contextlib import contextmanager
from datetime import datetime, timezone

PACKAGE_LOGGER = 'highway_scmpc'

_run_id = contextvars.ContextVar('run_id', default=None)
_step = contextvars.ContextVar('step', default=None)


class JSONFormatter(logging.Formatter):
    """
    Formats log records as JSON with run ids and structured data.
    """

    def format(self, record):
        log_data = {
            'timestamp': datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
        }

        run_id = _run_id.get()
        if run_id is not None:
            log_data['run_id'] = run_id
        step = _step.get()
        if step is not None:
            log_data['step'] = step

        if hasattr(record, 'extra_data'):
            log_data.update(record.extra_data)

        if record.exc_info:
            log_data['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_data, default=_json_default)


def _json_default(value):
    # numpy scalars and arrays end up in extra_data regularly
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)


class StructuredLoggerAdapter(logging.LoggerAdapter):
    """
    Adapter that moves the `extra` dict under `extra_data` for the JSON formatter.
    """

    def process(self, msg, kwargs):
        extra = kwargs.get('extra', {})
        kwargs['extra'] = {'extra_data': extra}
        return msg, kwargs


def get_logger(name):
    """Return a structured adapter for a module logger."""
    return StructuredLoggerAdapter(logging.getLogger(name), {})


@contextmanager
def run_context(run_id=None):
    """Bind a correlation id to every record emitted inside the block."""
    token = _run_id.set(run_id or str(uuid.uuid4()))
    try:
        yield _run_id.get()
    finally:
        _run_id.reset(token)


@contextmanager
def step_context(step):
    token = _step.set(step)
    try:
        yield
    finally:
        _step.reset(token)


def setup_structured_logging(logger=None, enable_json=None, level=None):
    """
    Configure logging for the package logger (or a given logger).

    Args:
        logger: logging.Logger to configure; defaults to the package logger
        enable_json: If True, use JSON formatter. If False, use standard text logging.
            Defaults to ENABLE_JSON_LOGGING from the environment.
        level: Log level name; defaults to LOG_LEVEL from the environment.

    Returns:
        The configured logger
    """
    if logger is None:
        logger = logging.getLogger(PACKAGE_LOGGER)
    if enable_json is None:
        enable_json = os.environ.get('ENABLE_JSON_LOGGING', 'true').lower() in ('true', '1', 'yes')
    if level is None:
        level = os.environ.get('LOG_LEVEL', 'INFO').upper()

    handler = logging.StreamHandler()
    if enable_json:
        handler.setFormatter(JSONFormatter())
    else:
        handler.setFormatter(logging.Formatter(
            '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
        ))

    logger.handlers.clear()
    logger.addHandler(handler)
    logger.setLevel(getattr(logging, level, logging.INFO))
    logger.propagate = False
    return logger


def setup_request_correlation(app):
    """
    Attach run-id middleware to a Flask application.

    The id is taken from the X-Correlation-ID header when another service passes one,
    and echoed back on the response.
    """
    from flask import g, request

    @app.before_request
    def set_correlation_id():
        g.correlation_id = request.headers.get('X-Correlation-ID', str(uuid.uuid4()))
        g.correlation_token = _run_id.set(g.correlation_id)

    @app.after_request
    def add_correlation_id_header(response):
        if hasattr(g, 'correlation_id'):
            response.headers['X-Correlation-ID'] = g.correlation_id
        return response

    @app.teardown_request
    def reset_correlation_id(exc):
        token = g.pop('correlation_token', None)
        if token is not None:
            try:
                _run_id.reset(token)
            except ValueError:
                _run_id.set(None)

    return app
