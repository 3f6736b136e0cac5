"""
Slow, direct numpy implementations the library is checked against. They
follow the definitions literally (loops over surfels, windows, neighbors)
and share no code with the package.
"""

import math

import numpy as np

ALPHA_MAX = 0.999
ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4


def random_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def ray_plane_hit(direction: np.ndarray, point: np.ndarray, normal: np.ndarray) -> np.ndarray | None:
    """Intersection of the ray from the origin along ``direction`` with a plane, or None."""
    denom = float(direction @ normal)
    if abs(denom) < 1e-12:
        return None
    t = float(point @ normal) / denom
    return t * direction


def brute_force_render(
    positions: np.ndarray,
    rotations: np.ndarray,
    scale: np.ndarray,
    color: np.ndarray,
    occlusion: np.ndarray,
    intrinsics: np.ndarray,
    cam_rotation: np.ndarray,
    cam_translation: np.ndarray,
    width: int,
    height: int,
    channels: tuple[str, ...],
    order: str = "ascending",
    culling: bool = False,
    background: dict[str, float | tuple[float, ...]] | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Evaluate every surfel at every pixel and composite in sorted order."""
    background = background or {}
    center = positions @ cam_rotation.T + cam_translation
    frames = cam_rotation @ rotations
    normal = frames[:, :, 2]
    depth = center[:, 2]

    keep = depth > 1e-6
    if culling:
        keep &= np.einsum("ij,ij->i", normal, center) < 0
    kept = np.nonzero(keep)[0]
    key = depth[kept] if order == "ascending" else -depth[kept]
    ordered = kept[np.argsort(key, kind="stable")]

    focal = 0.5 * (intrinsics[0, 0] + intrinsics[1, 1])
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    rays = np.stack([xs, ys, np.ones_like(xs)], -1) @ np.linalg.inv(intrinsics).T

    transmittance = np.ones((height, width))
    accumulated = np.zeros((height, width))
    sums = {
        "rgb": np.zeros((height, width, 3)),
        "depth": np.zeros((height, width, 1)),
        "normal": np.zeros((height, width, 3)),
        "back_normal": np.zeros((height, width, 3)),
        "occlusion": np.zeros((height, width, 1)),
    }
    for m in ordered:
        c, n = center[m], normal[m]
        tu, tv = frames[m, :, 0], frames[m, :, 1]
        s = max(scale[m], 0.5 * depth[m] / focal)
        facing = rays @ n
        edge_on = np.abs(facing) < 1e-8
        hit_depth = float(c @ n) / np.where(edge_on, 1.0, facing)
        points = hit_depth[..., None] * rays - c
        u, v = points @ tu, points @ tv
        falloff = np.exp(-(u * u + v * v) / (2 * s * s))
        hit = ~edge_on & (hit_depth > 1e-6) & (falloff >= ALPHA_CUTOFF)
        alpha = np.where(hit, np.minimum(falloff, ALPHA_MAX), 0.0)

        alive = transmittance >= TRANSMITTANCE_MIN
        weight = np.where(alive, transmittance * alpha, 0.0)
        accumulated += weight
        sums["rgb"] += weight[..., None] * color[m]
        sums["depth"] += (weight * hit_depth)[..., None]
        sums["normal"] += weight[..., None] * n
        sums["back_normal"] -= weight[..., None] * n
        sums["occlusion"] += (weight * occlusion[m])[..., None]
        transmittance = transmittance * (1.0 - alpha)

    images = {}
    covered = accumulated > 0
    for channel in channels:
        width = 3 if channel in ("rgb", "normal", "back_normal") else 1
        bg = np.broadcast_to(np.asarray(background.get(channel, 0.0), dtype=np.float64), (width,))
        if channel == "mask":
            images[channel] = accumulated[..., None] + (1 - accumulated)[..., None] * bg
        elif channel == "depth":
            raw = sums["depth"] / np.where(covered, accumulated, 1.0)[..., None]
            images[channel] = np.where(covered[..., None], raw, bg)
        elif channel in ("normal", "back_normal"):
            raw = sums[channel]
            length = np.linalg.norm(raw, axis=-1, keepdims=True)
            unit = raw / np.where(length > 0, length, 1.0)
            images[channel] = np.where((length > 0) & covered[..., None], unit, bg)
        else:
            images[channel] = sums[channel] + (1 - accumulated)[..., None] * bg
    return images, accumulated


def composite_loop(hits: list[tuple[float, np.ndarray]]) -> np.ndarray:
    result = np.zeros_like(np.asarray(hits[0][1], dtype=np.float64))
    transmittance = 1.0
    for alpha, payload in hits:
        if transmittance < TRANSMITTANCE_MIN:
            break
        alpha = min(alpha, ALPHA_MAX)
        result = result + transmittance * alpha * np.asarray(payload, dtype=np.float64)
        transmittance *= 1.0 - alpha
    return result


def mean_neighbor_distance(points: np.ndarray, k: int) -> np.ndarray:
    distances = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    np.fill_diagonal(distances, np.inf)
    return np.sort(distances, axis=1)[:, :k].mean(axis=1)


def inverse_distance_weights(
    points: np.ndarray, vertices: np.ndarray, vertex_weights: np.ndarray, k: int, eps: float = 1e-8
) -> np.ndarray:
    result = np.zeros((points.shape[0], vertex_weights.shape[1]))
    for i, p in enumerate(points):
        distances = np.linalg.norm(vertices - p, axis=1)
        nearest = np.argsort(distances, kind="stable")[:k]
        w = 1.0 / (distances[nearest] + eps)
        result[i] = (w[:, None] * vertex_weights[nearest]).sum(0) / w.sum()
    return result


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def direct_ssim(a: np.ndarray, b: np.ndarray, window: int = 11, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over every fully contained window, per channel, images (H, W, C)."""
    w = gaussian_window(window)
    height, width, channels = a.shape
    values = []
    for ch in range(channels):
        for i in range(height - window + 1):
            for j in range(width - window + 1):
                pa = a[i : i + window, j : j + window, ch]
                pb = b[i : i + window, j : j + window, ch]
                mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
                var_a = (w * pa * pa).sum() - mu_a**2
                var_b = (w * pb * pb).sum() - mu_b**2
                cov = (w * pa * pb).sum() - mu_a * mu_b
                values.append(
                    (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
    return float(np.mean(values))


def loop_psnr(target: np.ndarray, render: np.ndarray, region: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(target.shape[0]):
        for j in range(target.shape[1]):
            if region[i, j]:
                total += float(((target[i, j] - render[i, j]) ** 2).sum())
                count += target.shape[2]
    mse = total / count
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def loop_cosine_term(target: np.ndarray, render: np.ndarray, valid: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(target.shape[0]):
        for j in range(target.shape[1]):
            if valid[i, j]:
                t, r = target[i, j], render[i, j]
                total += float(t @ r / (np.linalg.norm(t) * np.linalg.norm(r)))
                count += 1
    return 1.0 - total / count


def silhouette(vertices: np.ndarray, faces: np.ndarray, intrinsics: np.ndarray, rotation: np.ndarray,
               translation: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pixels whose centers fall inside any projected triangle."""
    cam = vertices @ rotation.T + translation
    pixels = cam @ intrinsics.T
    pixels = pixels[:, :2] / pixels[:, 2:3]
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    mask = np.zeros((height, width), dtype=bool)
    for a, b, c in pixels[faces]:
        d = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(d) < 1e-12:
            continue
        l1 = ((b[0] - xs) * (c[1] - ys) - (c[0] - xs) * (b[1] - ys)) / d
        l2 = ((c[0] - xs) * (a[1] - ys) - (a[0] - xs) * (c[1] - ys)) / d
        l3 = 1.0 - l1 - l2
        mask |= (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
    return mask
