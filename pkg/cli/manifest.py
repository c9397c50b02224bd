import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union

from loguru import logger

from core import __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def manifest_path_for(out: Union[str, Path]) -> Path:
    """`<dir>/manifest.json` for directory outputs, `<file>.manifest.json` otherwise."""
    out = Path(out)
    if out.is_dir() or not out.suffix:
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict
    seed: Optional[int]
    code_version: str = __version__
    python: str = sys.version.split()[0]
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    outputs: List[str] = field(default_factory=list)
    status: str = "running"

    def finish(self, outputs: List[Union[str, Path]], status: str = "ok") -> None:
        self.outputs = [str(p) for p in outputs]
        self.finished = _now()
        self.status = status

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(path, "w") as f:
                json.dump(asdict(self), f, indent=2, default=str)
                f.write("\n")
            logger.debug(f"Wrote run manifest {path}")
            return path
        except Exception as e:
            logger.error(f"Failed to write manifest {path}: {e}")
            raise
