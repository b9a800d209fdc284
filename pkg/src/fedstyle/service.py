"""HTTP facade over the experiment harness.

Endpoints mirror the CLI verbs: generate a dataset, start an experiment
(runs in a background thread, poll by id), evaluate a checkpoint.  File
paths in requests are resolved on the server's filesystem; the bundled CLI
talks to an in-process app by default, so paths behave as local ones.
"""
from __future__ import annotations

import itertools
import threading

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .errors import FedstyleError
from .harness import (ExperimentConfig, evaluate_checkpoint, generate_dataset,
                      parse_config, run_experiment, serialize_config)

API_VERSION = "1"


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateDataRequest(BaseModel):
    out_dir: str
    samples_per_domain: int = 240
    num_classes: int = 5
    image_size: int = 16
    seed: int = 7
    fmt: str = "rgb32"


class GenerateDataResponse(BaseModel):
    domains: dict[str, str]
    separation_ratio: float


class ExperimentRequest(BaseModel):
    # flat key=value text, same syntax as a config file
    config: str


class CellResultModel(BaseModel):
    cell: str
    target: str
    seed: int
    accuracy: float | None
    error: str = ""


class ExperimentStatus(BaseModel):
    id: str
    status: str  # running | done | failed
    config: str
    out_dir: str
    log: list[str] = Field(default_factory=list)
    results: list[CellResultModel] = Field(default_factory=list)
    failures: int = 0
    summary: str = ""
    error: str = ""


class ExperimentCreated(BaseModel):
    id: str
    status: str


class EvaluateRequest(BaseModel):
    checkpoint: str
    config: str = ""
    split: str = "full"


class EvaluateResponse(BaseModel):
    accuracies: dict[str, float]


class _Job:
    def __init__(self, job_id: str, cfg: ExperimentConfig):
        self.id = job_id
        self.cfg = cfg
        self.status = "running"
        self.log: list[str] = []
        self.results: list[CellResultModel] = []
        self.failures = 0
        self.summary = ""
        self.error = ""
        self.lock = threading.Lock()
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _progress(self, line: str) -> None:
        with self.lock:
            self.log.append(line)

    def _run(self) -> None:
        try:
            report = run_experiment(self.cfg, progress=self._progress)
            summary = (report.out_dir / "summary.txt").read_text()
            with self.lock:
                self.results = [
                    CellResultModel(cell=r.cell, target=r.target, seed=r.seed,
                                    accuracy=r.accuracy, error=r.error)
                    for r in report.results]
                self.failures = report.failures
                self.summary = summary
                self.status = "done"
        except FedstyleError as exc:
            with self.lock:
                self.error = str(exc)
                self.status = "failed"

    def snapshot(self) -> ExperimentStatus:
        with self.lock:
            return ExperimentStatus(
                id=self.id, status=self.status,
                config=serialize_config(self.cfg), out_dir=self.cfg.out_dir,
                log=list(self.log), results=list(self.results),
                failures=self.failures, summary=self.summary,
                error=self.error)


def create_app() -> FastAPI:
    app = FastAPI(title="fedstyle", version=API_VERSION)
    jobs: dict[str, _Job] = {}
    counter = itertools.count(1)
    registry_lock = threading.Lock()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=API_VERSION)

    @app.post("/datasets/generate", response_model=GenerateDataResponse)
    def datasets_generate(req: GenerateDataRequest) -> GenerateDataResponse:
        try:
            info = generate_dataset(
                req.out_dir, samples_per_domain=req.samples_per_domain,
                num_classes=req.num_classes, image_size=req.image_size,
                seed=req.seed, fmt=req.fmt)
        except FedstyleError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return GenerateDataResponse(**info)

    @app.post("/experiments", response_model=ExperimentCreated, status_code=202)
    def experiments_create(req: ExperimentRequest) -> ExperimentCreated:
        try:
            cfg = parse_config(req.config)
        except FedstyleError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        with registry_lock:
            job_id = f"exp-{next(counter):04d}"
            job = _Job(job_id, cfg)
            jobs[job_id] = job
        job.thread.start()
        return ExperimentCreated(id=job_id, status=job.status)

    @app.get("/experiments/{job_id}", response_model=ExperimentStatus)
    def experiments_get(job_id: str) -> ExperimentStatus:
        with registry_lock:
            job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404,
                                detail=f"no experiment {job_id!r}")
        return job.snapshot()

    @app.post("/checkpoints/evaluate", response_model=EvaluateResponse)
    def checkpoints_evaluate(req: EvaluateRequest) -> EvaluateResponse:
        try:
            cfg = parse_config(req.config)
            accs = evaluate_checkpoint(req.checkpoint, cfg, which=req.split)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except FedstyleError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return EvaluateResponse(accuracies=accs)

    return app


app = create_app()
