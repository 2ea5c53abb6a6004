from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from runtime.versioning import run_meta


class RunArtifact(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid", protected_namespaces=())

    repo_version: str
    build_git_sha: str
    torch_version: str

    @classmethod
    def with_meta(cls, **kwargs):
        m = run_meta()
        return cls(
            repo_version=m.repo_version,
            build_git_sha=m.build_git_sha,
            torch_version=m.torch_version,
            **kwargs,
        )


class EvalReport(RunArtifact):
    schema_: str = Field("egpg.eval_report.v1", alias="schema")
    model_variant: str = "full"
    bleu: float = Field(ge=0.0, le=100.0)
    rouge1: float = Field(ge=0.0, le=1.0)
    rouge2: float = Field(ge=0.0, le=1.0)
    rougeL: float = Field(ge=0.0, le=1.0)
    meteor: float = Field(ge=0.0, le=1.0)
    ed_e: float = Field(ge=0.0)
    ed_r: float = Field(ge=0.0)
    cma: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    counts: Dict[str, int]
    notes: Dict[str, str] = Field(default_factory=dict)
    checks: Dict[str, bool] = Field(default_factory=dict)
    verdict: str = "PASS"


class MiningStats(RunArtifact):
    schema_: str = Field("egpg.mining_stats.v1", alias="schema")
    pairs: int = Field(ge=0)
    mined: int = Field(ge=0)
    dropped: int = Field(ge=0)
    mean_edit_distance: float = Field(ge=0.0)
    workers: int = Field(ge=1)
    tagger: str
    checks: Dict[str, bool]
    verdict: str


class ConfigRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    event: str = "config"
    config: Dict[str, Any]
    vocab_size: int
    vocab_hash: str
    train_items: int
    valid_items: int
    meta: Dict[str, str]
    notes: Dict[str, str] = Field(default_factory=dict)


class StepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    event: str = "step"
    epoch: int
    step: int
    nll: float
    ccl: float
    scl: float
    total: float
    grad_norm: float
    seconds: float


class EpochRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    event: str = "epoch"
    epoch: int
    step: int
    train_total: float
    valid_bleu: float
    valid_token_accuracy: float
    valid_nll: float
    best: bool
    seconds: float


class CMADiagnosis(RunArtifact):
    schema_: str = Field("egpg.cma_diagnosis.v1", alias="schema")
    model_variant: str
    cma: float = Field(ge=0.0, le=1.0)
    m: int = Field(ge=1)
    worst_rows: List[int]
    worst_margins: List[float]


class RetrievalNeighbor(BaseModel):
    rank: int
    index: int
    score: float
    text: str


class RetrievalListing(RunArtifact):
    schema_: str = Field("egpg.style_retrieval.v1", alias="schema")
    query: str
    top_k: int
    neighbors: List[RetrievalNeighbor]


EVAL_CSV_KEYS = [
    "model_variant",
    "bleu",
    "rouge1",
    "rouge2",
    "rougeL",
    "meteor",
    "ed_e",
    "ed_r",
    "cma",
    "n_items",
    "repo_version",
]

EVAL_CSV_HEADER = ",".join(EVAL_CSV_KEYS)

CMA_CSV_HEADER = "model_variant,cma,m"
