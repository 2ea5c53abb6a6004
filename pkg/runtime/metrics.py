from __future__ import annotations

from pathlib import Path
from typing import Optional

try:
    from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile  # type: ignore
except Exception:  # pragma: no cover
    CollectorRegistry = None
    Counter = None
    Gauge = None
    Histogram = None
    write_to_textfile = None


class TrainMetrics:
    """Per-run registry, so repeated fits in one process don't collide."""

    def __init__(self) -> None:
        if CollectorRegistry is None:  # pragma: no cover
            self.registry = None
            return
        self.registry = CollectorRegistry()
        self.steps = Counter("egpg_train_steps_total", "Optimizer steps taken", registry=self.registry)
        self.loss = Gauge("egpg_train_loss", "Last step loss by component", ["component"], registry=self.registry)
        self.step_seconds = Histogram(
            "egpg_train_step_seconds", "Wall-clock seconds per train step", registry=self.registry
        )
        self.valid_bleu = Gauge("egpg_valid_bleu", "Validation BLEU of the last epoch", registry=self.registry)

    @property
    def enabled(self) -> bool:
        return self.registry is not None

    def observe_step(self, nll: float, ccl: float, scl: float, total: float, seconds: float) -> None:
        if self.registry is None:  # pragma: no cover
            return
        self.steps.inc()
        for name, v in (("nll", nll), ("ccl", ccl), ("scl", scl), ("total", total)):
            self.loss.labels(component=name).set(v)
        self.step_seconds.observe(seconds)

    def observe_epoch(self, valid_bleu: float) -> None:
        if self.registry is None:  # pragma: no cover
            return
        self.valid_bleu.set(valid_bleu)

    def write(self, path: Path) -> Optional[Path]:
        if self.registry is None or write_to_textfile is None:  # pragma: no cover
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        return path
