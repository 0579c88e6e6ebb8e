import logging

from fastapi import APIRouter, HTTPException, Query
from pydantic import BaseModel, Field

from app import __version__
from app.config import build_config, key_registry, list_presets, load_config, merge_documents
from app.database import get_run, get_run_count, get_runs
from app.errors import ConfigError
from app.experiments import run_recorded

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api")


class RunRequest(BaseModel):
    preset: str | None = Field(None, description="Preset to start from")
    config: dict | None = Field(None, description="Config document merged over the preset")
    seed: int | None = Field(None, ge=0)
    output_dir: str | None = None


@router.get("/presets")
async def presets():
    return list_presets()


@router.get("/presets/{name}")
async def preset(name: str):
    try:
        return load_config(preset=name).model_dump(mode="json", exclude_none=True)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))


@router.get("/keys")
async def keys():
    return key_registry()


@router.get("/runs")
async def list_runs(
    kind: str = Query("all", description="Filter by experiment kind"),
    status: str = Query("all", description="running, finished or failed"),
    limit: int = Query(100, ge=1, le=500),
    offset: int = Query(0, ge=0),
):
    return await get_runs(kind=kind, status=status, limit=limit, offset=offset)


@router.get("/runs/{run_id}")
async def run_detail(run_id: int):
    run = await get_run(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"run {run_id} not found")
    return run


@router.post("/runs", status_code=201)
async def start_run(request: RunRequest):
    """Validate a config and run it; the response carries the manifest."""
    try:
        if request.config is not None:
            document = dict(request.config)
            if request.preset is not None:
                base = load_config(preset=request.preset).model_dump(mode="json", exclude_none=True)
                document = merge_documents(base, document)
            if request.seed is not None:
                document["seed"] = request.seed
            if request.output_dir is not None:
                document["output_dir"] = request.output_dir
            config = build_config(document)
        elif request.preset is not None:
            config = load_config(preset=request.preset, seed=request.seed, output_dir=request.output_dir)
        else:
            raise ConfigError("give a preset or a config document")
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))

    try:
        run_id, manifest = await run_recorded(config)
    except Exception as e:
        logger.exception(f"Run failed: {e}")
        raise HTTPException(status_code=500, detail=f"{type(e).__name__}: {e}")
    return {"id": run_id, "manifest": manifest}


@router.api_route("/health", methods=["GET", "HEAD"])
async def health_check():
    stats = await get_run_count()
    return {
        "status": "ok",
        "version": __version__,
        "presets": len(list_presets()),
        "runs": stats,
    }
