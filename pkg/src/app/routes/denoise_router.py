from fastapi import APIRouter, HTTPException, Request, Response

from app.dependencies import DenoiserDep
from app.models import DenoiserInfo, ErrorResponse
from core.errors import DenoiserShapeError, ProtocolError
from core.logger import logger
from optim.denoiser import check_denoised
from optim.denoiser_protocol import decode_request, encode_response

router = APIRouter(tags=["Denoiser"])

OCTET_STREAM = "application/octet-stream"


@router.get("/denoiser", response_model=DenoiserInfo, summary="Describe the denoiser backend")
def denoiser_info(denoiser: DenoiserDep) -> DenoiserInfo:
    return DenoiserInfo(backend=getattr(denoiser, "name", type(denoiser).__name__))


@router.post(
    "/denoise",
    response_class=Response,
    responses={
        200: {"content": {OCTET_STREAM: {}}, "description": "Encoded response message with the denoised image"},
        400: {"model": ErrorResponse, "description": "Malformed protocol message"},
        422: {"model": ErrorResponse, "description": "Denoiser returned an image of the wrong shape"},
    },
    summary="Denoise one rendered view",
)
async def denoise(request: Request, denoiser: DenoiserDep) -> Response:
    body = await request.body()
    try:
        header, tensors = decode_request(body)
    except ProtocolError as e:
        logger.warning(f"Rejected denoise request: {e}")
        raise HTTPException(status_code=400, detail=str(e))

    render = tensors["render"]
    denoised = denoiser.denoise(render, tensors["condition"], header.prompt, header.timestep, tensors["noise"])
    try:
        denoised = check_denoised(render, denoised)
    except DenoiserShapeError as e:
        logger.error(f"Denoiser backend misbehaved: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    return Response(content=encode_response(denoised), media_type=OCTET_STREAM)
