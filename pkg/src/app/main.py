from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from app.routes.health_router import router as health_router
from app.routes.denoise_router import router as denoise_router

app = FastAPI(
    title="SOAR Denoiser Service",
    version="1.0.0",
    summary="Serves one-step image denoising for score-distillation refinement over a compact byte protocol.",
    contact={
        "name": "SOAR Project",
    },
)

app.include_router(health_router)
app.include_router(denoise_router)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "*"
    ],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.main:app",
        host="0.0.0.0",
        port=8000,
        log_level="info"
    )
