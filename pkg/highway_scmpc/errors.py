"""
Error types and RFC 7807 Problem Details for highway-scmpc.

Every failure the library can signal is a ScmpcError subclass carrying an HTTP-style
status and a problem type suffix, so the same exception renders consistently from the
CLI (JSON on stderr) and from the Flask service (application/problem+json).

Usage:
    from highway_scmpc.errors import ConfigError, problem_response

    raise ConfigError('controller.N must be positive', key='controller.N')

    @app.errorhandler(ScmpcError)
    def handle(e):
        return problem_response(e)
"""

from typing import Any, Dict, Optional

from werkzeug.http import HTTP_STATUS_CODES


class ScmpcError(Exception):
    """Base class for all library errors."""

    status = 500
    title = 'Internal Error'
    type_suffix = 'internal-error'

    def __init__(self, detail: str, **extra: Any):
        super().__init__(detail)
        self.detail = detail
        self.extra = extra

    def to_problem(self, instance: Optional[str] = None) -> Dict[str, Any]:
        return problem_detail(
            self.status,
            title=self.title,
            detail=self.detail,
            type_suffix=self.type_suffix,
            instance=instance,
            **self.extra
        )


class ConfigError(ScmpcError):
    status = 422
    title = 'Invalid Configuration'
    type_suffix = 'invalid-config'


class TrackFormatError(ScmpcError):
    """Raised by CSV ingestion; `line` is the 1-based line in the source file."""

    status = 422
    title = 'Malformed Track Data'
    type_suffix = 'malformed-tracks'

    def __init__(self, detail: str, line: Optional[int] = None, **extra: Any):
        if line is not None:
            detail = f'line {line}: {detail}'
        super().__init__(detail, line=line, **extra)
        self.line = line


class LaneError(ScmpcError):
    status = 422
    title = 'Invalid Lane'
    type_suffix = 'invalid-lane'


class ModelError(ScmpcError):
    status = 422
    title = 'Invalid Model Input'
    type_suffix = 'invalid-model-input'


class SynthesisError(ScmpcError):
    status = 422
    title = 'Gain Synthesis Failed'
    type_suffix = 'gain-synthesis-failed'


class FilterError(ScmpcError):
    status = 500
    title = 'Filter Failure'
    type_suffix = 'filter-failure'


class OrderingError(ScmpcError):
    status = 500
    title = 'Priority Ordering Violation'
    type_suffix = 'ordering-violation'


class ScenarioError(ScmpcError):
    status = 422
    title = 'Scenario Generation Failed'
    type_suffix = 'scenario-generation-failed'


class FeasibilityViolation(ScmpcError):
    """The controller lost feasibility after a feasible start."""

    status = 500
    title = 'Recursive Feasibility Violated'
    type_suffix = 'feasibility-violation'


class CollisionError(ScmpcError):
    """Ego overlapped another vehicle; `forensics` holds the scene at the overlap."""

    status = 500
    title = 'Collision'
    type_suffix = 'collision'

    def __init__(self, detail: str, forensics: Optional[Dict[str, Any]] = None, **extra: Any):
        super().__init__(detail, **extra)
        self.forensics = forensics or {}


def problem_detail(status, title=None, detail=None, type_suffix=None, instance=None, **extra):
    """
    Build an RFC 7807 Problem Details object.

    Args:
        status: HTTP status code
        title: Short human-readable summary (defaults to HTTP status phrase)
        detail: Human-readable explanation specific to this occurrence
        type_suffix: Suffix for the problem type URI (e.g., "invalid-config")
        instance: URI reference identifying the specific occurrence
        **extra: Additional problem-specific fields (None values are dropped)

    Returns:
        dict ready for JSON serialization
    """
    if title is None:
        title = HTTP_STATUS_CODES.get(status, 'Error')

    problem = {
        'type': f'about:blank#{type_suffix}' if type_suffix else 'about:blank',
        'title': title,
        'status': status,
    }
    if detail:
        problem['detail'] = detail
    if instance:
        problem['instance'] = instance
    problem.update({k: v for k, v in extra.items() if v is not None})
    return problem


def problem_response(error, status=None, **extra):
    """
    Render an exception or plain message as a Flask problem+json response.

    Args:
        error: ScmpcError instance, or a string detail used with `status`
        status: HTTP status when `error` is not a ScmpcError
    """
    from flask import jsonify, request

    instance = request.path if request else None
    if isinstance(error, ScmpcError):
        problem = error.to_problem(instance=instance)
        problem.update(extra)
    else:
        status = status or 500
        problem = problem_detail(
            status,
            detail=str(error) if error else None,
            type_suffix=HTTP_STATUS_CODES.get(status, 'error').lower().replace(' ', '-'),
            instance=instance,
            **extra
        )

    response = jsonify(problem)
    response.status_code = problem['status']
    response.headers['Content-Type'] = 'application/problem+json'
    return response


def bad_request(detail=None, **extra):
    """400 Bad Request"""
    return problem_response(detail or 'The request could not be parsed', status=400, **extra)


def not_found(detail=None, resource=None, **extra):
    """404 Not Found"""
    if resource:
        detail = f'{resource} not found'
    return problem_response(detail or 'The requested resource was not found', status=404, **extra)


def internal_server_error(detail=None, **extra):
    """500 Internal Server Error"""
    return problem_response(detail or 'An unexpected error occurred', status=500, **extra)


def unprocessable_entity(detail=None, **extra):
    """422 Unprocessable Entity"""
    return problem_response(detail or 'The request body is not a valid experiment',
                            status=422, **extra)
