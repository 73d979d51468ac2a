
import json
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

import cli
from analysis.manager import AnalysisManager
from core.config import Settings
from core.errors import EstimationError, ValidationError

LOG_PREFIX = "[SERVER]"

# ---------------- CONFIG ---------------- #
settings = Settings.from_env()

app = FastAPI(title="rdmulti", description="RD designs with multiple cutoffs or multiple scores")


# ---------------- REQUEST MODELS ---------------- #

class CommonRequest(BaseModel):
    data: str
    y: str
    x: str
    weights: Optional[str] = None
    options: Optional[str] = None
    level: Optional[float] = None
    out_dir: Optional[str] = None
    n_jobs: Optional[int] = None
    delimiter: Optional[str] = None
    seed_check: bool = False


class RdmcRequest(CommonRequest):
    c: str
    pooled_opt: Optional[List[str]] = None
    weight_h: Optional[str] = None
    plot: bool = False
    test: Optional[str] = None


class RdmcplotRequest(CommonRequest):
    c: str
    p: Optional[str] = None
    h: Optional[str] = None
    nbins: Optional[str] = None
    binselect: Optional[str] = None
    nobins: bool = False
    nopoly: bool = False
    ci: Optional[float] = None


class RdmsRequest(CommonRequest):
    c: str
    x2: Optional[str] = None
    treat: Optional[str] = None
    cutoff_data: Optional[str] = None
    range: Optional[str] = None
    xnorm: Optional[str] = None
    boundary: Optional[str] = None
    closest: bool = False
    pooled_opt: Optional[List[str]] = None
    plot: bool = False
    test: Optional[str] = None


class SimulateRequest(BaseModel):
    design: str = "multicutoff"
    n: Optional[int] = None
    cutoffs: Optional[str] = None
    effects: Optional[str] = None
    corner: Optional[str] = None
    points: Optional[str] = None
    mean_coefs_left: Optional[str] = None
    mean_coefs_right: Optional[str] = None
    noise_sd: Optional[float] = None
    seed: Optional[int] = None
    out_dir: Optional[str] = None


# ---------------- EXECUTION ---------------- #

def _run(command: str, values: dict) -> dict:
    if "range" in values:
        values["range_"] = values.pop("range")
    run_settings = settings.override(
        out_dir=values.get("out_dir"),
        n_jobs=values.get("n_jobs"),
        level=values.get("level"),
        delimiter=values.get("delimiter"),
        quiet=True,
    )
    try:
        args = cli.namespace_for(command, **values)
        artifacts = cli.execute(args, run_settings, AnalysisManager(quiet=True))
    except ValidationError as err:
        raise HTTPException(status_code=422, detail=str(err))
    except EstimationError as err:
        raise HTTPException(status_code=409, detail=str(err))
    print(f"{LOG_PREFIX} {command} finished -> {run_settings.out_dir}")
    return json.loads(artifacts.report.to_json())


# ---------------- ROUTES ---------------- #

@app.get("/api/v1/health")
def health():
    return {"status": "HEALTHY"}


@app.post("/api/v1/rdmc")
def rdmc(request: RdmcRequest):
    return _run("rdmc", request.model_dump())


@app.post("/api/v1/rdmcplot")
def rdmcplot(request: RdmcplotRequest):
    return _run("rdmcplot", request.model_dump())


@app.post("/api/v1/rdms")
def rdms(request: RdmsRequest):
    return _run("rdms", request.model_dump())


@app.post("/api/v1/simulate")
def simulate(request: SimulateRequest):
    return _run("simulate", request.model_dump())
