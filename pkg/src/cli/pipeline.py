"""
Stage orchestration. Each stage reads its predecessor's checkpoint from the
output directory and writes its own checkpoint and loss curve next to it::

    refine-pose -> init -> reconstruct -> sds-refine

``render`` and ``evaluate`` use the checkpoint named in the render settings,
or the most advanced one available.
"""

import os
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from assets.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from assets.history import write_history
from assets.images import write_depth, write_mask, write_normal_map, write_rgb
from assets.manifest import Scene, load_manifest
from assets.scene import PoseSequence
from body.kinematics import BoneTransforms
from core.config import PipelineConfig, RenderSettings
from core.errors import NumericalAbort, StageOrderError
from core.logger import logger
from losses.perceptual import load_perceptual
from metrics.report import evaluate
from optim.denoiser import build_denoiser
from optim.occlusion import estimate_occlusion
from optim.pose_refinement import refine_pose
from optim.reconstruction import Reconstructor, frame_bones
from optim.sds import SdsRefiner
from render.camera import Camera, orbit_camera
from render.rasterizer import render
from render.request import RenderRequest
from surfels.cloud import SurfelCloud
from surfels.initialize import init_from_template, pretrain_cloud

COMMANDS: tuple[str, ...] = ("refine-pose", "init", "reconstruct", "sds-refine", "render", "evaluate")
PREDECESSOR = {"init": "refine-pose", "reconstruct": "init", "sds-refine": "reconstruct"}
CHECKPOINT_SUFFIX = ".ckpt"
REPORT_FILE = "eval_report.json"
THREADS_ENV = "SOAR_NUM_THREADS"


def checkpoint_path(out_dir: Path, stage: str) -> Path:
    return out_dir / f"{stage}{CHECKPOINT_SUFFIX}"


def history_path(out_dir: Path, stage: str) -> Path:
    return out_dir / f"{stage}_losses.jsonl"


def configure_threads(config: PipelineConfig) -> None:
    threads = config.threads or (int(os.getenv(THREADS_ENV)) if os.getenv(THREADS_ENV) else None)
    if threads:
        torch.set_num_threads(threads)
        logger.info(f"Using {threads} torch thread(s)")


@dataclass
class Pipeline:
    scene: Scene
    config: PipelineConfig

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    def _require(self, stage: str) -> Checkpoint:
        predecessor = PREDECESSOR.get(stage, stage)
        path = checkpoint_path(self.out_dir, predecessor)
        if not path.is_file():
            raise StageOrderError(stage, str(path))
        return load_checkpoint(path)

    def _latest(self, stage: str) -> Checkpoint:
        requested = self.config.render.checkpoint
        candidates = [requested] if requested else ["sds-refine", "reconstruct", "init"]
        for name in candidates:
            path = checkpoint_path(self.out_dir, name)
            if path.is_file():
                logger.info(f"{stage}: using checkpoint {path}")
                return load_checkpoint(path)
        raise StageOrderError(stage, str(checkpoint_path(self.out_dir, candidates[-1])))

    def _save(
        self,
        stage: str,
        sequence: PoseSequence,
        cloud: SurfelCloud | None = None,
        trainer_state: dict | None = None,
    ) -> Path:
        path = save_checkpoint(
            checkpoint_path(self.out_dir, stage),
            stage,
            sequence,
            cloud,
            self.config.surfels.field if cloud is not None else None,
            trainer_state,
            self.config.seed,
        )
        logger.info(f"{stage}: wrote {path}")
        return path

    def _abort(
        self,
        stage: str,
        error: NumericalAbort,
        history: list[dict[str, Any]],
        sequence: PoseSequence,
        cloud: SurfelCloud,
        trainer_state: dict[str, Any],
    ) -> None:
        """Keep the last finite state: the failing step never reached the optimizer."""
        logger.error(f"{stage}: aborted at step {trainer_state['step']}; saving the last finite state")
        write_history(history_path(self.out_dir, stage), history)
        self._save(stage, sequence, cloud, {**trainer_state, "status": "aborted", "error": str(error)})

    def refine_pose(self) -> Path:
        result = refine_pose(
            self.scene.sequence, self.scene.observations, self.scene.template, self.config.pose_refinement
        )
        write_history(
            history_path(self.out_dir, "refine-pose"),
            [{"iteration": i, "energy": value} for i, value in enumerate(result.optimizer.history)],
        )
        return self._save("refine-pose", result.sequence, trainer_state={"status": result.optimizer.status})

    def init(self) -> Path:
        previous = self._require("init")
        sequence = previous.sequence(self.scene.sequence.cameras)
        surfels = self.config.surfels
        cloud = init_from_template(
            self.scene.template, surfels.subdivisions, surfels, sequence.shape, self.config.seed
        )
        result = pretrain_cloud(cloud, surfels)
        write_history(
            history_path(self.out_dir, "init"),
            [{"step": i, "loss": value} for i, value in enumerate(result.losses)],
        )
        return self._save("init", sequence, cloud)

    def reconstruct(self) -> Path:
        previous = self._require("reconstruct")
        cloud = previous.cloud
        sequence = previous.sequence(self.scene.sequence.cameras)
        config = self.config.reconstruction
        reconstructor = Reconstructor(
            cloud,
            self.scene.template,
            sequence,
            self.scene.observations,
            config,
            self.config.seed,
            load_perceptual(config.perceptual_weights),
        )
        history: list[dict[str, Any]] = []
        try:
            reconstructor.run(history=history)
        except NumericalAbort as error:
            self._abort("reconstruct", error, history, sequence, cloud, reconstructor.state_dict())
            raise
        if not config.occlusion.interleaved:
            views = [(reconstructor.bones[t], reconstructor.cameras[t]) for t in reconstructor.frames]
            estimate_occlusion(cloud, views, config.occlusion)
        write_history(history_path(self.out_dir, "reconstruct"), history)
        return self._save("reconstruct", sequence, cloud, reconstructor.state_dict())

    def sds_refine(self) -> Path:
        previous = self._require("sds-refine")
        cloud = previous.cloud
        sequence = previous.sequence(self.scene.sequence.cameras)
        config = self.config.sds
        refiner = SdsRefiner(
            cloud,
            self.scene.template,
            sequence,
            self.scene.observations,
            build_denoiser(self.config.denoiser),
            config,
            self.config.seed,
            self.scene.prompt,
            load_perceptual(config.reconstruction.perceptual_weights),
        )
        history: list[dict[str, Any]] = []
        try:
            refiner.run(history=history)
        except NumericalAbort as error:
            self._abort("sds-refine", error, history, sequence, cloud, refiner.state_dict())
            raise
        write_history(history_path(self.out_dir, "sds-refine"), history)
        return self._save("sds-refine", sequence, cloud, refiner.state_dict())

    def render_views(self) -> Path:
        checkpoint = self._latest("render")
        cloud = checkpoint.cloud
        if cloud is None:
            raise StageOrderError("render", str(checkpoint_path(self.out_dir, "init")))
        sequence = checkpoint.sequence(self.scene.sequence.cameras)
        settings = self.config.render
        target = self.out_dir / "render" / checkpoint.stage
        for name, bones, camera in self._views(cloud, sequence, settings):
            write_channels(target, name, cloud, bones, camera, settings)
        logger.info(f"render: wrote images to {target}")
        return target

    def _views(
        self, cloud: SurfelCloud, sequence: PoseSequence, settings: RenderSettings
    ) -> Iterator[tuple[str, BoneTransforms | None, Camera]]:
        template = self.scene.template
        bones_per_frame = frame_bones(template, sequence, cloud.dtype)
        if settings.orbit_views:
            reference = sequence.cameras[0].to(torch.float64)
            rest_pelvis = template.shaped_joints(sequence.shape.to(template.dtype))[0]
            bones = None if settings.rest_pose else bones_per_frame[0]
            center = rest_pelvis if bones is None else bones.to(torch.float64).joint_position(rest_pelvis)
            radius = float((reference.center - center).norm())
            for k in range(settings.orbit_views):
                camera = orbit_camera(
                    center, radius, 360.0 * k / settings.orbit_views, 0.0,
                    reference.intrinsics, reference.width, reference.height,
                )
                yield f"orbit_{k:03d}", bones, camera
            return
        for t, camera in enumerate(sequence.cameras):
            bones = None if settings.rest_pose else bones_per_frame[t]
            yield f"frame_{self.scene.observations[t].index:03d}", bones, camera

    def evaluate(self) -> Path:
        checkpoint = self._latest("evaluate")
        if checkpoint.cloud is None:
            raise StageOrderError("evaluate", str(checkpoint_path(self.out_dir, "init")))
        sequence = checkpoint.sequence(self.scene.sequence.cameras)
        report = evaluate(
            checkpoint.cloud,
            self.scene.template,
            sequence,
            self.scene.observations,
            self.config.metrics,
            load_perceptual(self.config.reconstruction.perceptual_weights),
        )
        path = self.out_dir / REPORT_FILE
        report.write(path)
        logger.info(f"evaluate: wrote {path}")
        return path

    def run(self, command: str) -> Path:
        if command not in COMMANDS:
            raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(self.config.seed)
        handlers = {
            "refine-pose": self.refine_pose,
            "init": self.init,
            "reconstruct": self.reconstruct,
            "sds-refine": self.sds_refine,
            "render": self.render_views,
            "evaluate": self.evaluate,
        }
        logger.info(f"Running {command} (seed {self.config.seed}, output {self.out_dir})")
        return handlers[command]()


def write_channels(
    target: Path,
    name: str,
    cloud: SurfelCloud,
    bones: BoneTransforms | None,
    camera: Camera,
    settings: RenderSettings,
) -> None:
    channels = set(settings.channels)
    front = [c for c in ("rgb", "mask", "depth", "normal") if c in channels]
    with torch.no_grad():
        camera = camera.to(cloud.dtype)
        outputs = {}
        if front:
            outputs.update(render(cloud, bones, camera, RenderRequest(channels=tuple(front))).images)
        if "back_normal" in channels:
            request = RenderRequest(channels=("back_normal",), order="descending")
            outputs.update(render(cloud, bones, camera, request).images)
        if "occlusion" in channels:
            request = RenderRequest(channels=("occlusion",), culling=True)
            outputs.update(render(cloud, bones, camera, request).images)
    for channel, image in outputs.items():
        path = target / f"{name}_{channel}.png"
        if channel in ("normal", "back_normal"):
            write_normal_map(path, image)
        elif channel in ("mask", "occlusion"):
            write_mask(path, image)
        elif channel == "depth":
            write_depth(path, image)
        else:
            write_rgb(path, image)


def run_pipeline(command: str, manifest: str | Path, config: PipelineConfig) -> Path:
    scene = load_manifest(manifest)
    configure_threads(config)
    return Pipeline(scene, config).run(command)
