from pydantic import BaseModel, Field

from optim.denoiser_protocol import MAGIC, VERSION


class HealthResponse(BaseModel):
    status: str = Field("ok", description="Service status")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"status": "ok"}
            ]
        }
    }


class DenoiserInfo(BaseModel):
    backend: str = Field(..., description="Name of the denoiser answering requests")
    protocol_version: int = Field(VERSION, description="Byte protocol version spoken by POST /denoise")
    magic: str = Field(MAGIC.decode("ascii"), description="Leading bytes of every protocol message")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"backend": "identity", "protocol_version": 1, "magic": "SOARDN01"}
            ]
        }
    }


class ErrorResponse(BaseModel):
    detail: str = Field(..., description="Error message")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {"detail": "bad magic bytes"}
            ]
        }
    }
