"""Image-space losses. Images are (H, W, C) tensors."""

import torch
import torch.nn.functional as F
from torch import Tensor

from losses.perceptual import PerceptualDistance, PyramidDistance

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
L1_WEIGHT = 0.2
SSIM_WEIGHT = 0.8
COSINE_WEIGHT = 0.2


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _channels_last(image: Tensor) -> Tensor:
    return image[..., None] if image.ndim == 2 else image


def gaussian_window(size: int, sigma: float = SSIM_SIGMA, dtype: torch.dtype = torch.float64) -> Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(
    a: Tensor,
    b: Tensor,
    window: int = SSIM_WINDOW,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
) -> Tensor:
    """
    Mean local SSIM over valid (unpadded) Gaussian windows, averaged over
    channels. Images smaller than the window use the largest odd window
    that fits.
    """
    _check_same(a, b)
    a, b = _channels_last(a), _channels_last(b)
    height, width, channels = a.shape
    size = min(window, height, width)
    if size % 2 == 0:
        size -= 1
    kernel = gaussian_window(size, dtype=a.dtype)[None, None].expand(channels, 1, size, size)

    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(t, kernel, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (numerator / denominator).mean()


def l1(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    return (a - b).abs().mean()


def rgb_loss(target: Tensor, render: Tensor, perceptual: PerceptualDistance | None = None) -> Tensor:
    _check_same(target, render)
    perceptual = perceptual or PyramidDistance()
    return (
        L1_WEIGHT * l1(target, render)
        + SSIM_WEIGHT * (1.0 - ssim(target, render)) / 2.0
        + perceptual(target, render)
    )


def mask_loss(target: Tensor, render: Tensor) -> Tensor:
    return l1(target, render)


def cosine_term(target: Tensor, render: Tensor, valid: Tensor) -> Tensor:
    """1 - mean cosine over valid pixels (zero when none are valid)."""
    _check_same(target, render)
    dot = (target * render).sum(-1)
    norms = target.norm(dim=-1) * render.norm(dim=-1)
    valid = valid.reshape(dot.shape).bool() & (norms > 0)
    count = valid.sum()
    if int(count) == 0:
        return dot.new_zeros(())
    cosine = dot / torch.where(valid, norms, torch.ones_like(norms))
    return 1.0 - cosine[valid].sum() / count


def encode_normals(normals: Tensor) -> Tensor:
    return (normals + 1.0) / 2.0


def normal_map_loss(
    target: Tensor,
    render: Tensor,
    valid: Tensor,
    perceptual: PerceptualDistance | None = None,
) -> Tensor:
    perceptual = perceptual or PyramidDistance()
    return COSINE_WEIGHT * cosine_term(target, render, valid) + perceptual(
        encode_normals(target), encode_normals(render)
    )


def normal_loss(
    target: Tensor,
    render: Tensor,
    valid: Tensor,
    back_target: Tensor | None = None,
    back_render: Tensor | None = None,
    back_valid: Tensor | None = None,
    perceptual: PerceptualDistance | None = None,
) -> Tensor:
    """Front normal-map loss plus the back-map loss when a back map is given."""
    loss = normal_map_loss(target, render, valid, perceptual)
    if back_target is not None and back_render is not None:
        if back_valid is None:
            back_valid = torch.ones(back_target.shape[:-1], dtype=torch.bool)
        loss = loss + normal_map_loss(back_target, back_render, back_valid, perceptual)
    return loss


def loss_region(target_mask: Tensor, render_mask: Tensor, dilation: int) -> Tensor:
    """Union of both masks (thresholded at 0.5), dilated by ``dilation`` pixels."""
    union = ((target_mask > 0.5) | (render_mask.detach() > 0.5)).to(torch.float64)
    union = union.reshape(union.shape[0], union.shape[1])
    if dilation > 0:
        union = F.max_pool2d(union[None, None], 2 * dilation + 1, stride=1, padding=dilation)[0, 0]
    return union > 0


def restrict(render: Tensor, target: Tensor, region: Tensor) -> Tensor:
    """Replace render pixels outside ``region`` by the target so they carry no loss."""
    _check_same(target, render)
    mask = region.reshape(region.shape[0], region.shape[1], *([1] * (render.ndim - 2)))
    return torch.where(mask, render, target)
