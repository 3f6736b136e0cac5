"""Denoiser backends for score distillation: in-process mocks and an HTTP client."""

from typing import Protocol

import requests
import torch
from torch import Tensor

from core.config import DenoiserConfig
from core.errors import DenoiserShapeError, ProtocolError
from core.logger import logger
from optim.denoiser_protocol import decode_response, encode_request


class Denoiser(Protocol):
    def denoise(self, render: Tensor, condition: Tensor, prompt: str, timestep: float, noise: Tensor) -> Tensor:
        """One full denoising step of ``render`` from ``timestep`` to 0 using ``noise``."""
        ...


class IdentityDenoiser:
    """Returns its input; the distillation residual is exactly zero."""

    name = "identity"

    def denoise(self, render: Tensor, condition: Tensor, prompt: str, timestep: float, noise: Tensor) -> Tensor:
        return render.detach().clone()


class OracleDenoiser:
    """Always answers with the same image, whatever it is asked."""

    name = "oracle"

    def __init__(self, target: Tensor):
        self.target = target.detach()

    def denoise(self, render: Tensor, condition: Tensor, prompt: str, timestep: float, noise: Tensor) -> Tensor:
        return self.target.to(render.dtype).clone()


class RemoteDenoiser:
    """Client for a denoiser service speaking the byte protocol over ``POST /denoise``."""

    name = "remote"

    def __init__(self, url: str, timeout: float = 120.0, session: requests.Session | None = None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def denoise(self, render: Tensor, condition: Tensor, prompt: str, timestep: float, noise: Tensor) -> Tensor:
        body = encode_request(render, condition, noise, prompt, timestep)
        response = self.session.post(
            f"{self.url}/denoise",
            data=body,
            headers={"Content-Type": "application/octet-stream"},
            timeout=self.timeout,
        )
        if response.status_code != 200:
            raise ProtocolError(f"denoiser service answered {response.status_code}: {response.text[:200]}")
        return decode_response(response.content).to(render.dtype)


def check_denoised(render: Tensor, denoised: Tensor) -> Tensor:
    if tuple(denoised.shape) != tuple(render.shape):
        raise DenoiserShapeError(tuple(render.shape), tuple(denoised.shape))
    return denoised.detach().to(render.dtype)


def build_denoiser(config: DenoiserConfig) -> Denoiser:
    if config.kind == "remote":
        logger.info(f"Using remote denoiser at {config.url}")
        return RemoteDenoiser(config.url or "", config.timeout)
    logger.info("Using the identity denoiser; distillation terms vanish")
    return IdentityDenoiser()


def denoise_checked(
    denoiser: Denoiser, render: Tensor, condition: Tensor, prompt: str, timestep: float, noise: Tensor
) -> Tensor:
    with torch.no_grad():
        denoised = denoiser.denoise(render.detach(), condition, prompt, timestep, noise)
    return check_denoised(render, denoised)
