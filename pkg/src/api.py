"""
Read-only REST API over cached result records and generated reports.
"""

import os
from pathlib import Path
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from . import __version__
from .cache import cache_get, iter_records
from .models import ResultRecord
from .report import TABLES

DEFAULT_OUTPUT = Path("results")


def create_app(cache_root: Optional[Path] = None, output_dir: Optional[Path] = None) -> FastAPI:
    """Build the viewer app for one cache directory and one report directory."""
    output_dir = Path(output_dir or DEFAULT_OUTPUT)
    cache_root = Path(cache_root or os.environ.get("BH_CACHE_DIR") or output_dir / "cache")

    app = FastAPI(
        title="Brittle-homog result viewer",
        description="Read-only access to cached homogenization experiments",
        version=__version__,
    )

    @app.get("/")
    async def root():
        """Root endpoint providing API information."""
        return {
            "message": "Brittle-homog result viewer",
            "version": __version__,
            "endpoints": {"records": "/v1/records", "reports": "/v1/reports/{name}"},
            "reports": sorted(TABLES),
        }

    @app.get("/health")
    async def health_check():
        """Health check endpoint."""
        return {"status": "healthy", "cache": str(cache_root)}

    @app.get("/v1/records")
    async def list_records(operation: Optional[str] = None) -> List[dict]:
        """
        List cached records, optionally filtered by operation.

        Each entry carries key, operation, config hash and the bound status.
        """
        return [
            {"key": r.key, "operation": r.operation, "config_hash": r.config_hash, "bound_ok": r.bound_ok}
            for r in iter_records(cache_root)
            if operation is None or r.operation == operation
        ]

    @app.get("/v1/records/{key}")
    async def get_record(key: str) -> ResultRecord:
        record = cache_get(key, cache_root)
        if record is None:
            raise HTTPException(status_code=404, detail="Record not found")
        return record

    @app.get("/v1/reports/{name}", response_class=PlainTextResponse)
    async def get_report(name: str) -> str:
        """
        Return one generated table or chart.

        Args:
            name: file name such as estimates.csv or profiles.svg

        Returns:
            The file contents as text
        """
        path = output_dir / name
        if Path(name).name != name or not path.is_file():
            raise HTTPException(status_code=404, detail="Report not found")
        return path.read_text(encoding="utf-8")

    return app


app = create_app()
