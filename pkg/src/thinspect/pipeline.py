"""Offline setup artifact and the online estimate / inspect steps.

Setup runs pin segmentation, inspection-pose selection and template
generation once per part and grasp, and writes everything the online phase
needs into one directory.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .errors import ArtifactError, PinNotVisible
from .geometry import PinholeCamera, RigidTransform
from .match import MatchResult, TemplateSet, generate_templates, load_templates, match, save_templates
from .model import GraspSpec, TriMesh, load_mesh, save_mesh_ply
from .pincheck import InspectionReport, PinChecker, inspect, pin_view
from .pinseg import SegmentationResult, ThinnessParams, segment
from .viewsel import choose_inspection_pose, sweep_angles

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
FILES = {
    "manifest": "manifest.json",
    "config": "config.json",
    "mesh": "mesh.ply",
    "grasp": "grasp.json",
    "segmentation": "segmentation.json",
    "inspection_pose": "inspection_pose.json",
    "templates": "templates.npz",
    "pin_templates": "pin_templates.npz",
    "calibration": "calibration.json",
}


@dataclass
class SetupArtifact:
    config: Config
    mesh: TriMesh
    grasp: GraspSpec
    segmentation: SegmentationResult
    inspection: dict
    templates: TemplateSet
    timings: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=lambda: {"method": "gradient", "cutoff": None})
    warnings: list = field(default_factory=list)
    directory: Path | None = None

    @property
    def cam(self) -> PinholeCamera:
        return self.templates.cam

    @property
    def cam_T_tcp(self) -> RigidTransform:
        return self.templates.cam_T_tcp

    @property
    def pins(self) -> list:
        return self.segmentation.insertion_instances

    @property
    def instances(self) -> list:
        return self.segmentation.instances

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / FILES["config"]).write_text(json.dumps(self.config.to_dict(), indent=2))
        save_mesh_ply(d / FILES["mesh"], self.mesh)
        (d / FILES["grasp"]).write_text(json.dumps(self.grasp.to_dict(), indent=2))
        (d / FILES["segmentation"]).write_text(json.dumps(self.segmentation.to_dict()))
        (d / FILES["inspection_pose"]).write_text(json.dumps(self.inspection, indent=2))
        save_templates(d / FILES["templates"], self.templates)
        _save_pin_templates(d / FILES["pin_templates"], self)
        (d / FILES["calibration"]).write_text(json.dumps(self.calibration, indent=2))
        manifest = {
            "artifact_version": ARTIFACT_VERSION,
            "package_version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "files": FILES,
            "timings_s": self.timings,
            "n_pins": len(self.instances),
            "n_insertion_pins": len(self.pins),
            "inspection_pose": self.inspection.get("name"),
            "warnings": self.warnings,
        }
        (d / FILES["manifest"]).write_text(json.dumps(manifest, indent=2))
        self.directory = d
        return d

    @classmethod
    def load(cls, directory) -> SetupArtifact:
        d = Path(directory)
        try:
            manifest = json.loads((d / FILES["manifest"]).read_text())
        except (OSError, ValueError) as exc:
            raise ArtifactError(f"{d} is not a setup artifact: {exc}") from exc
        if manifest.get("artifact_version") != ARTIFACT_VERSION:
            raise ArtifactError(f"unsupported artifact version {manifest.get('artifact_version')}")
        try:
            cfg = Config.from_dict(json.loads((d / FILES["config"]).read_text()))
            mesh = load_mesh(d / FILES["mesh"])
            grasp = GraspSpec.from_dict(json.loads((d / FILES["grasp"]).read_text()))
            seg = SegmentationResult.from_dict(json.loads((d / FILES["segmentation"]).read_text()))
            insp = json.loads((d / FILES["inspection_pose"]).read_text())
            calib = json.loads((d / FILES["calibration"]).read_text())
        except ArtifactError:
            raise
        except Exception as exc:
            raise ArtifactError(f"corrupt artifact in {d}: {exc}") from exc
        ts = load_templates(d / FILES["templates"])
        return cls(cfg, mesh, grasp, seg, insp, ts, manifest.get("timings_s", {}), calib,
                   manifest.get("warnings", []), d)

    def save_calibration(self, method: str, cutoff: float, straight, bent) -> None:
        self.calibration = {"method": method, "cutoff": float(cutoff),
                            "straight_scores": [float(s) for s in straight],
                            "bent_scores": [float(s) for s in bent]}
        if self.directory is not None:
            (Path(self.directory) / FILES["calibration"]).write_text(json.dumps(self.calibration, indent=2))


def _save_pin_templates(path, art: SetupArtifact) -> None:
    """Edge templates of each insertion pin at the nominal inspection pose."""
    arrays = {}
    for p in art.pins:
        try:
            v = pin_view(art.mesh, art.instances, p, art.templates.cam_T_obj_nominal, art.cam,
                         art.config.pincheck.exclude_px, occluder=art.templates.finger_mask)
        except PinNotVisible:
            continue
        arrays[f"pin{p.id}_pixels"] = v.pixels
        arrays[f"pin{p.id}_directions"] = v.directions
    np.savez_compressed(path, **arrays)


def run_setup(mesh: TriMesh, grasp: GraspSpec, config: Config | None = None, directory=None) -> SetupArtifact:
    """Segment pins, pick the inspection pose and render templates."""
    cfg = config or Config()
    cam = cfg.camera_model()
    timings = {}
    t0 = time.perf_counter()
    ps = cfg.pinseg
    params = ThinnessParams(r_max=ps.r_max_mm * 1e-3, lambda_ratio=ps.lambda_ratio)
    seg = segment(mesh, grasp, cfg.model.n_points, cfg.model.seed, params, ps.k,
                  min_instance_vertices=ps.min_instance_vertices, shell_fraction=ps.shell_fraction)
    t1 = time.perf_counter()
    timings["segmentation"] = t1 - t0

    vs = cfg.viewsel
    spec = [tuple(c) for c in vs.candidates] if vs.candidates else None
    best, cands = choose_inspection_pose(mesh, seg.insertion_instances, grasp, cam, vs.distance_m,
                                         sweep_angles(vs.sweep_deg, vs.step_deg), vs.v_min, vs.o_max, spec,
                                         vs.plane_view_min)
    t2 = time.perf_counter()
    timings["pose_check"] = t2 - t1

    ts = generate_templates(mesh, grasp, best.cam_T_tcp, cam, cfg.match)
    t3 = time.perf_counter()
    timings["templates"] = t3 - t2
    timings["total"] = t3 - t0

    inspection = {"name": best.name, "cam_T_tcp": best.cam_T_tcp.matrix().tolist(),
                  "candidates": [c.summary() for c in cands]}
    art = SetupArtifact(cfg, mesh, grasp, seg, inspection, ts, timings, warnings=list(seg.warnings))
    if directory is not None:
        art.save(directory)
    return art


def setup_from_files(mesh_path, grasp_path, config_path=None, overrides=None, directory=None) -> SetupArtifact:
    cfg = load_config(config_path, overrides)
    mesh = load_mesh(mesh_path, cfg.model.unit_scale)
    try:
        grasp = GraspSpec.from_dict(json.loads(Path(grasp_path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        from .errors import ParseError

        raise ParseError(f"bad grasp file {grasp_path}: {exc}") from exc
    return run_setup(mesh, grasp, cfg, directory)


def estimate(art: SetupArtifact, image) -> MatchResult:
    return match(image, art.templates, art.config.match)


def checker(art: SetupArtifact, image, cam_T_obj: RigidTransform) -> PinChecker:
    return PinChecker(image, art.mesh, art.instances, cam_T_obj, art.cam, art.config.pincheck,
                      occluder=art.templates.finger_mask)


def inspect_image(art: SetupArtifact, image, method: str | None = None, cutoff: float | None = None,
                  result: MatchResult | None = None) -> tuple[MatchResult, InspectionReport]:
    """Estimate the pose (unless given) and score every insertion pin against the cutoff."""
    method = method or art.calibration.get("method") or art.config.pincheck.method
    if cutoff is None:
        cutoff = art.calibration.get("cutoff")
        if cutoff is None or art.calibration.get("method") != method:
            raise ArtifactError(f"no calibrated cutoff for method {method!r}; run calibrate first")
    if result is None:
        result = estimate(art, image)
    report = inspect(image, result.cam_T_obj, art.pins, method, float(cutoff), art.mesh, art.instances, art.cam,
                     art.config.pincheck, occluder=art.templates.finger_mask)
    return result, report
