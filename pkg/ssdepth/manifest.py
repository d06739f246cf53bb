import json
import logging
import os
import subprocess

from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
FALLBACK_VERSION = '0.1.0'


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace('+00:00', 'Z')


def describe_version() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    try:
        result = subprocess.run(
            ['git', 'describe', '--tags', '--always', '--dirty'],
            cwd=root,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return FALLBACK_VERSION
    text = result.stdout.strip()
    if result.returncode != 0 or not text:
        return FALLBACK_VERSION
    return text


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = field(default_factory=describe_version)
    started: str = field(default_factory=utc_now)
    finished: Optional[str] = None
    arguments: Dict[str, Any] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, directory: str, name: str = MANIFEST_NAME) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        with open(path, 'w', encoding='utf8') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write('\n')
        logger.debug('wrote manifest %s', path)
        return path

    def finish(self, directory: str, outputs: List[str], name: str = MANIFEST_NAME) -> str:
        self.outputs = list(outputs)
        self.finished = utc_now()
        return self.write(directory, name)

    @classmethod
    def read(cls, path: str) -> 'RunManifest':
        with open(path, 'r', encoding='utf8') as handle:
            data = json.load(handle)
        return cls(**data)
