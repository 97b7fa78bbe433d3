"""Command-line entry point.

Exit codes: 0 success or accept, 1 reject or failed evaluation, 2 no match,
3 setup infeasible or no score separation, 4 input/output or artifact error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np

from . import __version__, evaluation as ev, synth
from .config import load_config
from .errors import (ArtifactError, EmptyMesh, InvalidSpec, NoFeasiblePose, NoMatch, NoSeparation, ParseError,
                     SizeMismatch, TooFewEdges)
from .pincheck import METHODS, calibrate_cutoff, load_calibration, save_overlay
from .pipeline import SetupArtifact, checker, estimate, inspect_image, run_setup, setup_from_files

log = logging.getLogger("thinspect")

EXIT_OK, EXIT_REJECT, EXIT_NO_MATCH, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3, 4


def _read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return img


def _write_png(path, img) -> None:
    if not cv2.imwrite(str(path), img):
        raise OSError(f"cannot write {path}")


def _emit(doc: dict, path=None) -> None:
    text = json.dumps(doc, indent=2)
    if path:
        Path(path).write_text(text)
    print(text)


def timing_table(timings: dict) -> str:
    rows = [("segmentation", "segmentation"), ("pose check", "pose_check"),
            ("template generation", "templates"), ("total", "total")]
    return "\n".join(f"{label:<20} {timings.get(key, float('nan')):8.2f} s" for label, key in rows)


def cmd_setup(a) -> int:
    art = setup_from_files(a.mesh, a.grasp, a.config, a.set, a.out)
    print(f"artifact: {a.out}")
    print(f"pins: {len(art.instances)} found, {len(art.pins)} insertion pins")
    print(f"inspection pose: {art.inspection['name']}")
    for w in art.warnings:
        print(f"warning: {w}")
    print(timing_table(art.timings))
    return EXIT_OK


def cmd_estimate(a) -> int:
    art = SetupArtifact.load(a.artifact)
    img = _read_image(a.image)
    r = estimate(art, img)
    _emit(r.to_dict(), a.json)
    if a.overlay:
        from .match import overlay

        _write_png(a.overlay, overlay(img, art.templates, r))
    return EXIT_OK


def cmd_inspect(a) -> int:
    art = SetupArtifact.load(a.artifact)
    if a.calibration:
        cal = load_calibration(a.calibration)
        art.calibration = cal
    img = _read_image(a.image)
    result, report = inspect_image(art, img, a.method, a.cutoff)
    print(report.summary())
    if a.json:
        doc = report.to_dict()
        doc["pose"] = result.to_dict()
        Path(a.json).write_text(json.dumps(doc, indent=2))
    if a.overlay:
        save_overlay(a.overlay, img, report, checker(art, img, result.cam_T_obj))
    return EXIT_OK if report.accepted else EXIT_REJECT


def _suite_pins(doc):
    if "pins" not in doc:
        raise ParseError("suite has no ground-truth pin list")
    return ev.pins_from_doc(doc["pins"])


def cmd_calibrate(a) -> int:
    art = SetupArtifact.load(a.artifact)
    doc, scenes = ev.read_suite(a.suite)
    res = ev.evaluate_pincheck(art, scenes, _suite_pins(doc), (a.method,))
    s, b = res.straight[a.method], res.bent[a.method]
    cutoff = calibrate_cutoff(s, b)
    art.save_calibration(a.method, cutoff, s, b)
    print(f"method {a.method}: straight min {min(s):.3f}, bent max {max(b):.3f}, cutoff {cutoff:.3f}")
    return EXIT_OK


def cmd_eval_pose(a) -> int:
    art = SetupArtifact.load(a.artifact)
    doc, scenes = ev.read_suite(a.suite)
    res = ev.evaluate_pose(art, scenes)
    print(res.table())
    if a.json:
        Path(a.json).write_text(json.dumps({"mean_mm": res.mean_mm, "max_mm": res.max_mm, "mean_deg": res.mean_deg,
                                            "failures": res.failures,
                                            "rows": [r.__dict__ for r in res.rows]}, indent=2, default=float))
    return EXIT_OK if res.failures == 0 and res.max_mm < a.max_mm else EXIT_REJECT


def cmd_eval_pincheck(a) -> int:
    art = SetupArtifact.load(a.artifact)
    doc, scenes = ev.read_suite(a.suite)
    methods = tuple(a.methods) if a.methods else METHODS
    res = ev.evaluate_pincheck(art, scenes, _suite_pins(doc), methods)
    print(res.table())
    if a.json:
        Path(a.json).write_text(json.dumps({m: {"straight": res.straight[m], "bent": res.bent[m],
                                                "separates": res.separated(m)} for m in methods}, indent=2))
    return EXIT_OK


def cmd_eval_seg(a) -> int:
    from .pinseg import ThinnessParams, segment

    cfg = load_config(a.config, a.set)
    mesh, grasp, labels, pins, contact = ev.read_component(a.component)
    ps = cfg.pinseg
    seg = segment(mesh, grasp, cfg.model.n_points, cfg.model.seed,
                  ThinnessParams(r_max=ps.r_max_mm * 1e-3, lambda_ratio=ps.lambda_ratio), ps.k,
                  min_instance_vertices=ps.min_instance_vertices, shell_fraction=ps.shell_fraction)
    res = ev.evaluate_segmentation(seg, labels, pins, contact)
    print(res.summary())
    ok = (res.precision >= 0.9 and res.recall >= 0.9 and res.n_found == res.n_truth
          and res.n_insertion == res.n_contact and res.studs_removed)
    return EXIT_OK if ok else EXIT_REJECT


def cmd_gen_suite(a) -> int:
    spec = synth.default_spec(a.family)
    comp = synth.build_component(spec)
    if a.kind == "component":
        ev.write_component(a.out, comp)
        print(f"component {a.family}: {len(comp.instances)} pins, {len(comp.mesh.vertices)} vertices -> {a.out}")
        return EXIT_OK
    if a.artifact:
        art = SetupArtifact.load(a.artifact)
        cam_T_tcp, cam = art.cam_T_tcp, art.cam
    else:
        art = run_setup(comp.mesh, comp.grasp, load_config(a.config, a.set))
        cam_T_tcp, cam = art.cam_T_tcp, art.cam
    pins = {"pins": ev.pins_doc(comp.instances, [p.id for p in comp.insertion_pins])}
    if a.kind == "pose":
        scenes = ev.pose_suite(comp, cam_T_tcp, cam, a.noise, a.seed)
    else:
        scenes = ev.pincheck_suite(comp, cam_T_tcp, cam, a.straight, a.bent, a.noise, a.seed)
    ev.write_suite(a.out, scenes, a.kind, a.family, pins)
    print(f"{a.kind} suite {a.family}: {len(scenes)} scenes -> {a.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thinspect", description="In-hand pose estimation and pin inspection.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_args(q):
        q.add_argument("--config", help="JSON configuration file")
        q.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")

    q = sub.add_parser("setup", help="segment pins, choose the inspection pose, render templates")
    q.add_argument("mesh")
    q.add_argument("grasp")
    q.add_argument("--out", required=True, help="artifact directory")
    cfg_args(q)
    q.set_defaults(func=cmd_setup)

    q = sub.add_parser("estimate", help="estimate the in-hand pose from one image")
    q.add_argument("artifact")
    q.add_argument("image")
    q.add_argument("--json", help="write the result here as well")
    q.add_argument("--overlay", help="PNG with the matched template drawn")
    q.set_defaults(func=cmd_estimate)

    q = sub.add_parser("inspect", help="estimate the pose and score every pin")
    q.add_argument("artifact")
    q.add_argument("image")
    q.add_argument("--method", choices=METHODS)
    q.add_argument("--cutoff", type=float)
    q.add_argument("--calibration", help="calibration JSON (defaults to the artifact's)")
    q.add_argument("--json")
    q.add_argument("--overlay")
    q.set_defaults(func=cmd_inspect)

    q = sub.add_parser("calibrate", help="find the score cutoff from a bent/straight suite")
    q.add_argument("artifact")
    q.add_argument("suite")
    q.add_argument("--method", choices=METHODS, default="gradient")
    q.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("eval-pose", help="pose error table on an offset suite")
    q.add_argument("artifact")
    q.add_argument("suite")
    q.add_argument("--max-mm", type=float, default=1.0, help="fail when the max error reaches this")
    q.add_argument("--json")
    q.set_defaults(func=cmd_eval_pose)

    q = sub.add_parser("eval-pincheck", help="score populations per method on a bent/straight suite")
    q.add_argument("artifact")
    q.add_argument("suite")
    q.add_argument("--methods", nargs="+", choices=METHODS)
    q.add_argument("--json")
    q.set_defaults(func=cmd_eval_pincheck)

    q = sub.add_parser("eval-seg", help="segmentation precision/recall on a generated component")
    q.add_argument("component", help="directory written by gen-suite component")
    cfg_args(q)
    q.set_defaults(func=cmd_eval_seg)

    q = sub.add_parser("gen-suite", help="generate a synthetic component or scene suite")
    q.add_argument("kind", choices=("component", "pose", "pincheck"))
    q.add_argument("--family", choices=synth.FAMILIES, default="header_grid")
    q.add_argument("--out", required=True)
    q.add_argument("--artifact", help="reuse the inspection pose of this artifact")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--noise", type=float, default=5.0, help="intensity noise sigma in gray levels")
    q.add_argument("--straight", type=int, default=5)
    q.add_argument("--bent", type=int, default=5)
    cfg_args(q)
    q.set_defaults(func=cmd_gen_suite)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NoMatch as exc:
        print(f"no match: {exc}", file=sys.stderr)
        return EXIT_NO_MATCH
    except NoFeasiblePose as exc:
        print(f"no feasible inspection pose: {exc}", file=sys.stderr)
        for c in getattr(exc, "candidates", None) or []:
            print(f"  {c.summary() if hasattr(c, 'summary') else c}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (TooFewEdges, NoSeparation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, ParseError, ArtifactError, EmptyMesh, InvalidSpec, SizeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
