"""
Version stamped into run summaries, the CLI and the service.

The release comes from `setup.cfg` in a source checkout or from the installed package
metadata; the git revision is appended as a local version label (`0.1.0+4be1f09`). Tarball
checkouts use the VERSION file that install.sh writes in place of git.
"""

import configparser
import subprocess
from importlib import metadata
from pathlib import Path
from typing import Optional, Union

SERVICE_NAME = 'highway-scmpc'
UNKNOWN = 'unknown'
REPO_DIR = Path(__file__).resolve().parent.parent


def installed_version() -> Optional[str]:
    try:
        return metadata.version(SERVICE_NAME)
    except metadata.PackageNotFoundError:
        return None


def release_version(repo_dir: Path) -> Optional[str]:
    parser = configparser.ConfigParser(interpolation=None)
    if parser.read(repo_dir / 'setup.cfg') and parser.has_option('metadata', 'version'):
        return parser.get('metadata', 'version').strip() or None
    return installed_version()


def git_revision(repo_dir: Path) -> Optional[str]:
    try:
        result = subprocess.run(['git', 'rev-parse', '--short', 'HEAD'], capture_output=True,
                                text=True, cwd=repo_dir, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


def _version_file(repo_dir: Path) -> Optional[str]:
    try:
        return (repo_dir / 'VERSION').read_text().strip() or None
    except OSError:
        return None


def get_version(repo_dir: Optional[Union[str, Path]] = None) -> str:
    """`<release>+<revision>`, either part alone when the other is unknown."""
    repo = Path(repo_dir) if repo_dir is not None else REPO_DIR
    release = release_version(repo)
    revision = git_revision(repo) or _version_file(repo)
    if release and revision:
        return f'{release}+{revision}'
    return release or revision or UNKNOWN


VERSION = get_version()
