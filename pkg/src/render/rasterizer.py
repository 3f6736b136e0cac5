"""
Tile-based differentiable surfel rasterizer.

Surfels are transformed to camera space, culled, sorted once per view by
the depth of their centers and binned into 16x16 pixel tiles using a
conservative screen-space bound. Tiles are evaluated in chunks of similar
workload; every pixel intersects its ray with the disk planes of the
surfels in its tile and composites them front to back in sorted order.

Gradients come from autograd. While gradients are enabled each chunk is
checkpointed, so the backward pass recomputes per-pixel intersections
instead of keeping them alive.
"""

import math
from collections.abc import Mapping
from dataclasses import dataclass

import torch
from torch import Tensor
from torch.utils.checkpoint import checkpoint

from body.kinematics import BoneTransforms, skin_surfels
from core.errors import ChannelNotRenderedError
from render.camera import Camera
from render.request import CHANNEL_WIDTH, RenderOutput, RenderRequest, SurfelBatch
from render.splat import (
    CUTOFF_RADIUS,
    NEAR_PLANE,
    composite_weights,
    effective_scale,
    splat_weight,
)
from surfels.cloud import SurfelCloud

TILE_SIZE = 16
CHUNK_PAIRS = 1 << 21  # pixel-surfel pairs evaluated per chunk


@dataclass(slots=True)
class _ViewSurfels:
    """Camera-space surfels that survived culling, in compositing order."""

    center: Tensor  # (M, 3)
    tangent_u: Tensor
    tangent_v: Tensor
    normal: Tensor
    scale: Tensor  # (M,) effective
    color: Tensor  # (M, 3)
    occlusion: Tensor  # (M,)
    bbox: Tensor  # (M, 4) long: x0, y0, x1, y1 inclusive

    @property
    def count(self) -> int:
        return self.center.shape[0]


def _screen_bounds(view: _ViewSurfels, camera: Camera) -> Tensor:
    """Pixel box around the projected cutoff square of every surfel, padded by one pixel."""
    with torch.no_grad():
        radius = (CUTOFF_RADIUS * view.scale)[:, None, None]
        signs = torch.tensor([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]], dtype=view.center.dtype)
        offsets = signs[None, :, 0:1] * view.tangent_u[:, None, :] + signs[None, :, 1:2] * view.tangent_v[:, None, :]
        corners = view.center[:, None, :] + radius * offsets  # (M, 4, 3)
        behind = (corners[..., 2] <= NEAR_PLANE).any(1)
        safe = torch.where(behind[:, None, None], torch.ones_like(corners), corners)
        pixels = camera.project(safe)
        lo = torch.floor(pixels.min(1).values) - 1
        hi = torch.ceil(pixels.max(1).values) + 1

        limit = torch.tensor([camera.width - 1, camera.height - 1], dtype=lo.dtype)
        lo = torch.where(behind[:, None], torch.zeros_like(lo), lo)
        hi = torch.where(behind[:, None], limit.expand_as(hi), hi)
        # keep huge values representable before the integer cast
        lo = lo.clamp(-1.0, float(max(camera.width, camera.height)))
        hi = hi.clamp(-1.0, float(max(camera.width, camera.height)))
        return torch.cat([lo, hi], dim=1).long()


def _prepare(batch: SurfelBatch, camera: Camera, request: RenderRequest) -> _ViewSurfels:
    rotation = camera.rotation
    center = batch.positions @ rotation.T + camera.translation
    frames = rotation @ batch.rotations
    normal = frames[..., 2]
    depth = center[:, 2]

    keep = depth > NEAR_PLANE
    if request.culling:
        keep &= (normal * center).sum(-1) < 0
    kept = torch.nonzero(keep).flatten()
    key = depth.detach()[kept]
    if request.order == "descending":
        key = -key
    order = kept[torch.sort(key, stable=True).indices]

    view = _ViewSurfels(
        center=center[order],
        tangent_u=frames[order, :, 0],
        tangent_v=frames[order, :, 1],
        normal=normal[order],
        scale=effective_scale(batch.scale[order], depth[order], camera.focal),
        color=batch.color[order],
        occlusion=batch.occlusion[order],
        bbox=torch.zeros(0, 4, dtype=torch.long),
    )
    if view.count == 0:
        return view
    view.bbox = _screen_bounds(view, camera)
    on_screen = (
        (view.bbox[:, 2] >= 0)
        & (view.bbox[:, 3] >= 0)
        & (view.bbox[:, 0] <= camera.width - 1)
        & (view.bbox[:, 1] <= camera.height - 1)
    )
    if not bool(on_screen.all()):
        visible = torch.nonzero(on_screen).flatten()
        view = _ViewSurfels(
            view.center[visible], view.tangent_u[visible], view.tangent_v[visible],
            view.normal[visible], view.scale[visible], view.color[visible],
            view.occlusion[visible], view.bbox[visible],
        )
    limit = torch.tensor([camera.width - 1, camera.height - 1] * 2)
    view.bbox = torch.minimum(view.bbox.clamp_min(0), limit)
    return view


def _bin_tiles(bbox: Tensor, tiles_x: int, num_tiles: int) -> Tensor:
    """
    Per-tile surfel lists (num_tiles, max_len) holding compositing ranks,
    padded with -1. Ranks within a tile stay in compositing order.
    """
    m = bbox.shape[0]
    if m == 0:
        return torch.full((num_tiles, 0), -1, dtype=torch.long)
    t0 = bbox[:, :2] // TILE_SIZE
    t1 = bbox[:, 2:] // TILE_SIZE
    span = t1 - t0 + 1
    counts = span[:, 0] * span[:, 1]

    rank = torch.repeat_interleave(torch.arange(m), counts)
    first = torch.repeat_interleave(torch.cumsum(counts, 0) - counts, counts)
    local = torch.arange(rank.shape[0]) - first
    width = span[rank, 0]
    tile = (t0[rank, 1] + local // width) * tiles_x + (t0[rank, 0] + local % width)

    ordered = torch.sort(tile * m + rank).indices
    tile, rank = tile[ordered], rank[ordered]
    per_tile = torch.bincount(tile, minlength=num_tiles)
    start = torch.cumsum(per_tile, 0) - per_tile
    slot = torch.arange(tile.shape[0]) - start[tile]

    lists = torch.full((num_tiles, int(per_tile.max())), -1, dtype=torch.long)
    lists[tile, slot] = rank
    return lists


def _tile_pixels(camera: Camera, tiles_x: int, tiles_y: int) -> tuple[Tensor, Tensor]:
    """Flat pixel index (num_tiles, 256) of every tile slot and whether it lies inside the image."""
    offsets = torch.arange(TILE_SIZE)
    ty, tx = torch.meshgrid(torch.arange(tiles_y), torch.arange(tiles_x), indexing="ij")
    ys = (ty.reshape(-1, 1, 1) * TILE_SIZE + offsets[None, :, None]).expand(-1, TILE_SIZE, TILE_SIZE)
    xs = (tx.reshape(-1, 1, 1) * TILE_SIZE + offsets[None, None, :]).expand(-1, TILE_SIZE, TILE_SIZE)
    ys, xs = ys.reshape(tiles_x * tiles_y, -1), xs.reshape(tiles_x * tiles_y, -1)
    inside = (ys < camera.height) & (xs < camera.width)
    flat = torch.where(inside, ys * camera.width + xs, torch.zeros_like(ys))
    return flat, inside


def _chunks(per_tile: Tensor) -> list[Tensor]:
    """Group busy tiles by workload so padding stays small."""
    busy = torch.nonzero(per_tile > 0).flatten()
    if busy.numel() == 0:
        return []
    busy = busy[torch.sort(per_tile[busy], descending=True, stable=True).indices]
    chunks, start = [], 0
    while start < busy.numel():
        widest = int(per_tile[busy[start]])
        size = max(1, CHUNK_PAIRS // (TILE_SIZE * TILE_SIZE * widest))
        chunks.append(busy[start : start + size])
        start += size
    return chunks


def _shade_chunk(
    rays: Tensor,
    lists: Tensor,
    center: Tensor,
    tangent_u: Tensor,
    tangent_v: Tensor,
    normal: Tensor,
    scale: Tensor,
    color: Tensor,
    occlusion: Tensor,
    channels: tuple[str, ...],
) -> tuple[Tensor, ...]:
    """Composite one chunk: rays (C, P, 3), lists (C, M). Returns alpha and raw channel sums."""
    present = lists >= 0
    index = lists.clamp_min(0)
    ray = rays[:, :, None, :]
    alpha, depth, _ = splat_weight(
        center[index][:, None],
        tangent_u[index][:, None],
        tangent_v[index][:, None],
        normal[index][:, None],
        scale[index][:, None],
        ray,
    )
    alpha = torch.where(present[:, None, :], alpha, torch.zeros_like(alpha))
    weights, accumulated = composite_weights(alpha)

    sums = [accumulated]
    for channel in channels:
        if channel == "rgb":
            sums.append(torch.einsum("cpm,cmk->cpk", weights, color[index]))
        elif channel == "mask":
            sums.append(accumulated[..., None])
        elif channel == "depth":
            sums.append((weights * depth).sum(-1, keepdim=True))
        elif channel == "normal":
            sums.append(torch.einsum("cpm,cmk->cpk", weights, normal[index]))
        elif channel == "back_normal":
            sums.append(-torch.einsum("cpm,cmk->cpk", weights, normal[index]))
        elif channel == "occlusion":
            sums.append(torch.einsum("cpm,cm->cp", weights, occlusion[index])[..., None])
    return tuple(sums)


def _finish(channel: str, raw: Tensor, alpha: Tensor, background: Tensor) -> Tensor:
    covered = (alpha > 0)[:, None]
    if channel == "depth":
        safe = torch.where(covered, alpha[:, None], torch.ones_like(raw))
        return torch.where(covered, raw / safe, background.expand_as(raw))
    if channel in ("normal", "back_normal"):
        length = raw.norm(dim=-1, keepdim=True)
        nonzero = length > 0
        safe = torch.where(nonzero, length, torch.ones_like(length))
        return torch.where(nonzero & covered, raw / safe, background.expand_as(raw))
    return raw + (1.0 - alpha)[:, None] * background


def rasterize(batch: SurfelBatch, camera: Camera, request: RenderRequest) -> RenderOutput:
    """Render posed world-space surfels through ``camera``."""
    width, height = camera.width, camera.height
    if width <= 0 or height <= 0:
        raise ValueError(f"cannot render a {width}x{height} image")
    dtype = batch.positions.dtype
    camera = camera.to(dtype)
    view = _prepare(batch, camera, request)

    tiles_x, tiles_y = math.ceil(width / TILE_SIZE), math.ceil(height / TILE_SIZE)
    num_tiles = tiles_x * tiles_y
    lists = _bin_tiles(view.bbox, tiles_x, num_tiles)
    flat, inside = _tile_pixels(camera, tiles_x, tiles_y)
    rays = camera.pixel_rays(dtype).reshape(-1, 3)

    channels = request.channels
    pixel_ids: list[Tensor] = []
    pieces: list[tuple[Tensor, ...]] = []
    tensors = (view.center, view.tangent_u, view.tangent_v, view.normal, view.scale, view.color, view.occlusion)
    needs_grad = torch.is_grad_enabled() and any(t.requires_grad for t in tensors)
    per_tile = (lists >= 0).sum(1)
    for tiles in _chunks(per_tile):
        tile_lists = lists[tiles, : int(per_tile[tiles].max())]
        tile_rays = rays[flat[tiles]]
        if needs_grad:
            sums = checkpoint(_shade_chunk, tile_rays, tile_lists, *tensors, channels, use_reentrant=False)
        else:
            sums = _shade_chunk(tile_rays, tile_lists, *tensors, channels)
        keep = inside[tiles].reshape(-1)
        pixel_ids.append(flat[tiles].reshape(-1)[keep])
        pieces.append(tuple(s.reshape(-1, *s.shape[2:])[keep] for s in sums))

    total = width * height
    if pieces:
        ids = torch.cat(pixel_ids)
        gathered = [torch.cat([piece[k] for piece in pieces]) for k in range(len(channels) + 1)]
    else:
        ids = torch.zeros(0, dtype=torch.long)
        gathered = [torch.zeros(0, dtype=dtype)] + [
            torch.zeros(0, CHANNEL_WIDTH[c], dtype=dtype) for c in channels
        ]

    alpha = torch.zeros(total, dtype=dtype).index_put((ids,), gathered[0])
    images: dict[str, Tensor] = {}
    for channel, raw_pixels in zip(channels, gathered[1:]):
        raw = torch.zeros(total, CHANNEL_WIDTH[channel], dtype=dtype).index_put((ids,), raw_pixels)
        image = _finish(channel, raw, alpha, request.background_for(channel, dtype))
        images[channel] = image.reshape(height, width, -1)
    return RenderOutput(images=images, alpha=alpha.reshape(height, width))


def pose_cloud(
    cloud: SurfelCloud,
    bones: BoneTransforms | None,
    detach_geometry: bool = False,
) -> SurfelBatch:
    """
    Skin the cloud and read its attributes. With ``detach_geometry`` only
    the occlusion parameters stay connected to the graph.
    """
    with torch.set_grad_enabled(torch.is_grad_enabled() and not detach_geometry):
        rotations = cloud.rotations()
        positions = cloud.positions
        if bones is not None:
            posed = skin_surfels(positions, rotations, cloud.skin_weights, bones)
            positions, rotations = posed.positions, posed.rotations
        attributes = cloud.attributes()
    return SurfelBatch(positions, rotations, attributes.scale, attributes.color, cloud.occlusion)


def render(
    cloud: SurfelCloud,
    bones: BoneTransforms | None,
    camera: Camera,
    request: RenderRequest,
    detach_geometry: bool = False,
) -> RenderOutput:
    """Pose ``cloud`` with ``bones`` (canonical pose when None) and rasterize it."""
    output = rasterize(pose_cloud(cloud, bones, detach_geometry), camera, request)
    output.inputs = {
        "positions": cloud.positions,
        "quaternions": cloud.quaternions,
        "occlusion": cloud.occlusion,
        **{f"field.{name}": p for name, p in cloud.field.named_parameters()},
    }
    return output


def render_backward(
    output: RenderOutput,
    grad_outputs: Mapping[str, Tensor],
    wrt: Mapping[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """
    Gradients of sum(grad_outputs[c] * image[c]) w.r.t. the render inputs
    (or the tensors in ``wrt``, e.g. pose parameters). Inputs the images do
    not depend on get zero gradients.
    """
    missing = [channel for channel in grad_outputs if channel not in output.images]
    if missing:
        raise ChannelNotRenderedError(missing, output.channels)
    targets = dict(wrt if wrt is not None else output.inputs)
    targets = {name: t for name, t in targets.items() if t.requires_grad}
    if not targets:
        return {}
    images = [output.images[channel] for channel in grad_outputs]
    grads = torch.autograd.grad(
        images,
        list(targets.values()),
        [grad_outputs[channel] for channel in grad_outputs],
        retain_graph=True,
        allow_unused=True,
    )
    return {
        name: torch.zeros_like(tensor) if grad is None else grad
        for (name, tensor), grad in zip(targets.items(), grads)
    }
