import os
from functools import lru_cache
from typing import Annotated
from fastapi import Depends

from optim.denoiser import Denoiser, IdentityDenoiser

DENOISER_BACKEND = os.getenv("SOAR_DENOISER", "identity")

BACKENDS = {
    "identity": IdentityDenoiser,
}


@lru_cache()
def get_denoiser() -> Denoiser:
    if DENOISER_BACKEND not in BACKENDS:
        raise RuntimeError(
            f"Unknown SOAR_DENOISER backend {DENOISER_BACKEND!r}; expected one of {', '.join(BACKENDS)}"
        )
    return BACKENDS[DENOISER_BACKEND]()


DenoiserDep = Annotated[Denoiser, Depends(get_denoiser)]
