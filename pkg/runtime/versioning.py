from __future__ import annotations

import os
import subprocess
from dataclasses import asdict, dataclass
from typing import Dict

RUNLOG_SCHEMA_VERSION = "v1"


def _run_git(args: list[str]) -> str:
    try:
        out = subprocess.check_output(["git"] + args, stderr=subprocess.DEVNULL)
        return out.decode("utf-8").strip()
    except Exception:
        return ""


def get_build_git_sha() -> str:
    sha = os.environ.get("EGPG_BUILD_GIT_SHA", "").strip()
    if sha:
        return sha
    return _run_git(["rev-parse", "HEAD"]) or "UNKNOWN"


def get_repo_version() -> str:
    v = os.environ.get("EGPG_REPO_VERSION", "").strip()
    if v:
        return v
    return _run_git(["describe", "--tags", "--always", "--dirty"]) or "0.0.0"


def _lib_version(name: str) -> str:
    try:
        mod = __import__(name)
        return str(getattr(mod, "__version__", "unknown"))
    except Exception:
        return "missing"


@dataclass(frozen=True)
class RunMeta:
    runlog_schema: str
    repo_version: str
    build_git_sha: str
    torch_version: str
    numpy_version: str

    def as_dict(self) -> Dict[str, str]:
        return asdict(self)


def run_meta() -> RunMeta:
    return RunMeta(
        runlog_schema=RUNLOG_SCHEMA_VERSION,
        repo_version=get_repo_version(),
        build_git_sha=get_build_git_sha(),
        torch_version=_lib_version("torch"),
        numpy_version=_lib_version("numpy"),
    )
