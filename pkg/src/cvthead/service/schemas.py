"""Pydantic request/response bodies for the render service."""
from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class CameraBody(BaseModel):
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0


class RenderRequest(BaseModel):
    beta: list[float]
    phi: list[float]
    theta: list[float]
    camera: CameraBody = Field(default_factory=CameraBody)
    offsets: Optional[list[list[float]]] = None
    mode: Optional[str] = None
    size: Optional[int] = None

    def params_json(self) -> dict:
        return {
            "beta": self.beta,
            "phi": self.phi,
            "theta": self.theta,
            "camera": self.camera.model_dump(),
            "offsets": self.offsets,
        }


class ModelInfo(BaseModel):
    n_vertices: int
    n_coarse: int
    shape_dims: int
    expr_dims: int
    joints: int
    frame_size: int
