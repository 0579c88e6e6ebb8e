import logging
import os
from contextlib import asynccontextmanager

from fastapi import FastAPI

from dotenv import load_dotenv
load_dotenv()

from app import __version__
from app.database import init_db
from app.api import router as api_router

# Configure logging
logging.basicConfig(
    level=os.getenv("LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Startup and shutdown logic."""
    logger.info("Initializing run ledger...")
    await init_db()
    yield
    logger.info("Application shut down.")


app = FastAPI(
    title="RBMC Sampler",
    description="Random Batch Monte Carlo sampling of N-body Gibbs measures with a mean-field oracle",
    version=__version__,
    lifespan=lifespan,
)

# Register API routes
app.include_router(api_router)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run("main:app", host="0.0.0.0", port=8050, reload=True)
