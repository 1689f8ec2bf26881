"""
highway-scmpc Health Check Library

Checks what a run depends on: the QP solver, the experiment config, the track dataset
it references, and room for run outputs.

Usage:
    from health_check import HealthChecker

    checker = HealthChecker('highway-scmpc', config_path='configs/case1.json')

    @app.route('/health')
    def health():
        return checker.get_health()
"""

import os
import shutil
import time
from datetime import datetime, timezone

import numpy as np

# share of the output filesystem in use
DISK_DEGRADED_PCT = 85.0
DISK_UNHEALTHY_PCT = 95.0

CRITICAL_CHECKS = ('solver', 'config', 'dataset', 'output')


class HealthChecker:
    """
    Readiness report of the simulator.

    Checks:
    - solver: a one-variable QP with an active bound is solved to its known optimum
    - config: the experiment config loads and validates (when configured)
    - dataset: the config's track file is readable (when the config replays a dataset)
    - output: the run output directory is writable and its filesystem has room
    """

    def __init__(self, service_name, config_path=None, dataset_path=None, output_dir=None):
        """
        Args:
            service_name (str): reported as `service`
            config_path (str): experiment config to validate (optional)
            dataset_path (str): track CSV to check; defaults to the config's dataset
            output_dir (str): run output directory; defaults to $SCMPC_OUT_DIR or runs
        """
        self.service_name = service_name
        self.config_path = config_path
        self.dataset_path = dataset_path
        self.output_dir = output_dir or os.environ.get('SCMPC_OUT_DIR', 'runs')

    def check_solver(self):
        """min x^2 s.t. x >= 1 must return x = 1 with multiplier 2."""
        from highway_scmpc.qp import QpProblem, solve_qp

        started = time.perf_counter()
        try:
            sol = solve_qp(QpProblem(H=np.array([[2.0]]), g=np.zeros(1),
                                     A_ineq=np.array([[-1.0]]), b_ineq=np.array([-1.0])))
        except Exception as e:
            return {'status': 'unhealthy', 'error': str(e)}
        elapsed_ms = round((time.perf_counter() - started) * 1000.0, 3)
        if not sol.optimal or abs(sol.x[0] - 1.0) > 1e-8 or abs(sol.duals[0] - 2.0) > 1e-8:
            return {'status': 'unhealthy', 'error': f'self-test returned x = {sol.x.tolist()}'}
        return {'status': 'healthy', 'latency_ms': elapsed_ms, 'iterations': sol.iterations}

    def check_config(self):
        """None when no config is set; points the dataset check at a replayed track file."""
        if not self.config_path:
            return None
        from highway_scmpc.config import load_config

        try:
            cfg = load_config(self.config_path)
        except Exception as e:
            return {'status': 'unhealthy', 'path': str(self.config_path), 'error': str(e)}
        if self.dataset_path is None:
            self.dataset_path = cfg.simulation.dataset
        return {'status': 'healthy', 'path': str(self.config_path), 'name': cfg.name}

    def check_dataset(self):
        if not self.dataset_path:
            return None
        path = str(self.dataset_path)
        if not os.path.isfile(path):
            return {'status': 'unhealthy', 'path': path, 'error': 'not found'}
        if not os.access(path, os.R_OK):
            return {'status': 'unhealthy', 'path': path, 'error': 'not readable'}
        return {'status': 'healthy', 'path': path,
                'size_mb': round(os.path.getsize(path) / 2 ** 20, 2)}

    def check_output(self):
        """
        Room for run outputs. The directory need not exist yet; its nearest existing
        parent is checked instead.

        Returns:
            dict: status, used share of the filesystem and free space in GB
        """
        probe = os.path.abspath(self.output_dir)
        while not os.path.isdir(probe) and os.path.dirname(probe) != probe:
            probe = os.path.dirname(probe)
        try:
            usage = shutil.disk_usage(probe)
        except OSError as e:
            return {'status': 'unknown', 'path': probe, 'error': str(e)}

        used_pct = 100.0 * usage.used / usage.total
        if not os.access(probe, os.W_OK):
            status = 'unhealthy'
        elif used_pct >= DISK_UNHEALTHY_PCT:
            status = 'unhealthy'
        elif used_pct >= DISK_DEGRADED_PCT:
            status = 'degraded'
        else:
            status = 'healthy'
        return {'status': status, 'path': probe, 'used_pct': round(used_pct, 2),
                'free_gb': round(usage.free / 2 ** 30, 2)}

    def get_overall_status(self, checks):
        """
        'unhealthy' if any critical check failed, 'degraded' if the output filesystem is
        nearly full, 'healthy' otherwise. Skipped and 'unknown' checks do not count.
        """
        if any(checks.get(name, {}).get('status') == 'unhealthy' for name in CRITICAL_CHECKS):
            return 'unhealthy'
        if checks.get('output', {}).get('status') == 'degraded':
            return 'degraded'
        return 'healthy'

    def get_health(self):
        """
        Returns:
            tuple: (report, HTTP status) with 200 only when every check is healthy
        """
        from highway_scmpc.version import get_version

        checks = {'solver': self.check_solver()}
        # config before dataset: the config may name the track file
        for name, result in (('config', self.check_config()),
                             ('dataset', self.check_dataset())):
            if result is not None:
                checks[name] = result
        checks['output'] = self.check_output()

        status = self.get_overall_status(checks)
        report = {
            'service': self.service_name,
            'status': status,
            'version': get_version(),
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'checks': checks,
        }
        return report, 200 if status == 'healthy' else 503
