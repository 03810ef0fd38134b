"""Experiment orchestration behind the ``mpk`` subcommands.

Every runner returns ``(report, exit_code)``. Reports are plain JSON-able
dicts; :func:`write_report` adds a checksum over everything except the
wall-clock field so two runs with the same seed can be compared byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fitting, gradcheck, metrics, synth
from . import upsampler as up
from .errors import DivergedTraining, InvalidConfig, MissingPredictions
from .losses import LossWeights
from .mesh import ROOT_JOINT, BarycentricCoord, barycentric_2d, closest_point_on_triangle, landmark_joints
from .tensorio import load_tensor, save_tensor

log = logging.getLogger("mpk")

WALL_CLOCK_KEY = "wall_clock_s"

DEFAULT_LR_SCALE = {"scores": 1000.0, "logits": 10.0, "visibility_logits": 10.0}


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    steps: int = 1000
    clip: float = 10.0
    lr_scale: dict = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))


@dataclass
class ExperimentConfig:
    seed: int = 0
    scene: dict = field(default_factory=dict)
    loss_weights: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    alpha: float = 1.0
    sigma: float = 1.0
    bins: int = 64
    pad: float = 0.5
    boundary_reduction: str = "mean"
    init_scale: float = 0.01
    ablate_consistency: bool = True
    gps_kappa: float = metrics.GPS_KAPPA
    oks_kappa: float = metrics.OKS_KAPPA
    n_scenes: int = 4
    scenes_dir: str | None = None
    gradcheck: dict = field(default_factory=dict)
    upsampler: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        self.scene_config = synth.SceneConfig.from_dict(self.scene)
        self.weights = LossWeights.from_dict(self.loss_weights)
        try:
            self.opt = OptimizerConfig(**self.optimizer)
        except TypeError as e:
            raise InvalidConfig(f"bad optimizer config: {e}") from None
        if self.opt.lr < 0 or self.opt.steps < 0 or self.opt.clip < 0:
            raise InvalidConfig("optimizer lr, steps and clip must be nonnegative")
        if not (self.alpha > 0 and self.sigma > 0 and self.bins >= 2 and self.pad >= 0):
            raise InvalidConfig("alpha, sigma must be positive; bins >= 2; pad >= 0")
        if self.boundary_reduction not in ("mean", "sum"):
            raise InvalidConfig("boundary_reduction must be 'mean' or 'sum'")
        if self.n_scenes < 1:
            raise InvalidConfig("n_scenes must be >= 1")
        if self.gps_kappa <= 0 or self.oks_kappa <= 0:
            raise InvalidConfig("metric kappas must be positive")
        if self.scenes_dir is not None and not Path(self.scenes_dir).is_dir():
            raise InvalidConfig(f"scenes_dir {self.scenes_dir!r} does not exist")

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, InvalidConfig):
                raise
            raise InvalidConfig(str(e)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{path}: {e}") from None
        return cls.from_dict(d)

    def echo(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- reports ---------------------------------------------------------------

def jsonable(x):
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def report_checksum(report: dict) -> str:
    body = {k: v for k, v in report.items() if k not in (WALL_CLOCK_KEY, "checksum")}
    return hashlib.sha256(json.dumps(jsonable(body), sort_keys=True).encode()).hexdigest()


def write_report(report: dict, out_dir) -> Path:
    report = jsonable(report)
    report["checksum"] = report_checksum(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _artifact_checksums(root: Path, paths) -> dict:
    return {str(Path(p).relative_to(root)): file_sha256(p) for p in sorted(paths)}


def _base_report(command: str, cfg: ExperimentConfig) -> dict:
    return {"command": command, "seed": cfg.seed, "config": cfg.echo()}


# -- gradcheck -------------------------------------------------------------------

def run_gradcheck(cfg: ExperimentConfig):
    gc = {"instances": 20, "loss_tol": gradcheck.LOSS_TOL, "render_tol": gradcheck.RENDER_TOL,
          "only": None, **cfg.gradcheck}
    if gc["instances"] < 1 or gc["loss_tol"] < 0 or gc["render_tol"] < 0:
        raise InvalidConfig("gradcheck instances must be >= 1 and tolerances >= 0")
    t0 = time.perf_counter()
    results = gradcheck.run_checks(cfg.seed, gc["instances"], gc["loss_tol"], gc["render_tol"], gc["only"])
    table = {r.name: {"max_rel_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed,
                      "instances": len(r.errors)} for r in results}
    for r in results:
        log.info("gradcheck %-20s max rel err %.3e (tol %.0e) %s", r.name, r.max_error,
                 r.tolerance, "ok" if r.passed else "FAIL")
    ok = all(r.passed for r in results)
    report = {**_base_report("gradcheck", cfg), "gradcheck": table, "passed": ok,
              WALL_CLOCK_KEY: time.perf_counter() - t0}
    return report, 0 if ok else 1


# -- fit -------------------------------------------------------------------------

def make_problem(cfg: ExperimentConfig, scene, weights: LossWeights | None = None) -> fitting.FitProblem:
    return fitting.FitProblem(scene, weights or cfg.weights, cfg.alpha, cfg.sigma, cfg.bins, cfg.pad,
                              boundary_reduction=cfg.boundary_reduction)


def fit_scene(cfg: ExperimentConfig, scene, weights: LossWeights | None = None):
    prob = make_problem(cfg, scene, weights)
    params = prob.init_params(cfg.seed, cfg.init_scale)
    params, trace, state = fitting.gradient_descent(prob, params, cfg.opt.lr, cfg.opt.steps,
                                                    cfg.opt.clip, cfg.opt.lr_scale)
    return prob, trace, state


def _fit_summary(prob, trace, state) -> dict:
    return {
        "loss_trace": trace,
        "initial_loss": trace[0],
        "final_loss": trace[-1],
        "final_components": {k: v.value for k, v in state.components.items()},
        "metrics": prob.metrics(state.vertices),
    }


def run_fit(cfg: ExperimentConfig, out_dir):
    t0 = time.perf_counter()
    out = Path(out_dir)
    scene = synth.generate_scene(cfg.seed, cfg.scene_config)
    try:
        prob, trace, state = fit_scene(cfg, scene)
    except DivergedTraining as e:
        log.error("fit diverged: %s", e)
        return {**_base_report("fit", cfg), "error": str(e), WALL_CLOCK_KEY: time.perf_counter() - t0}, 1
    summary = _fit_summary(prob, trace, state)
    log.info("fit: loss %.4g -> %.4g, PA-MPJPE %.3f px", trace[0], trace[-1], summary["metrics"]["pa_mpjpe_px"])
    pred_dir = out / "preds"
    pred_dir.mkdir(parents=True, exist_ok=True)
    pred_path = pred_dir / "scene_0000.mpt"
    save_tensor(pred_path, state.vertices.fused_xyz)
    report = {**_base_report("fit", cfg), "fit": summary}
    if cfg.ablate_consistency:
        w0 = LossWeights.from_dict({**asdict(cfg.weights), "w_cons": 0.0})
        prob0, trace0, state0 = fit_scene(cfg, scene, w0)
        s0 = _fit_summary(prob0, trace0, state0)
        report["ablation_no_consistency"] = s0
        report["consistency_improves_2d"] = (summary["metrics"]["vertex_error_2d_px"]
                                             < s0["metrics"]["vertex_error_2d_px"])
    report["artifacts"] = _artifact_checksums(out, [pred_path])
    report[WALL_CLOCK_KEY] = time.perf_counter() - t0
    return report, 0


# -- eval ------------------------------------------------------------------------

def load_scenes(cfg: ExperimentConfig) -> list:
    if cfg.scenes_dir:
        dirs = sorted(p for p in Path(cfg.scenes_dir).iterdir() if (p / "scene.json").exists())
        if not dirs:
            raise InvalidConfig(f"no scenes found in {cfg.scenes_dir}")
        return [synth.load_scene(d) for d in dirs]
    return [synth.generate_scene(cfg.seed + i, cfg.scene_config) for i in range(cfg.n_scenes)]


def prediction_path(pred_dir, i: int) -> Path:
    return Path(pred_dir) / f"scene_{i:04d}.mpt"


def query_surface(pred_px, topology, pixel):
    """Surface point of a predicted (pixel-frame) mesh seen at ``pixel``.

    Picks the closest front-facing triangle (by mean depth) covering the pixel;
    if none covers it, the projected triangle nearest to it.
    """
    faces = topology.faces
    tri = pred_px[faces]
    P = np.asarray(pixel, float)
    lam = barycentric_2d(P, tri[:, 0, :2], tri[:, 1, :2], tri[:, 2, :2])
    lam = np.where(np.isfinite(lam), lam, -1.0)
    e1, e2 = tri[:, 1, :2] - tri[:, 0, :2], tri[:, 2, :2] - tri[:, 0, :2]
    front = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    cover = np.all(lam >= -1e-9, axis=1)
    cand = np.flatnonzero(cover & front)
    if len(cand) == 0:
        cand = np.flatnonzero(cover)
    if len(cand):
        f = int(cand[np.argmin(tri[cand, :, 2].mean(axis=1))])
        w = np.clip(lam[f], 0.0, None)
        return BarycentricCoord(f, tuple(w / w.sum()))
    best, best_f, best_w = np.inf, 0, None
    for f, t in enumerate(tri[:, :, :2]):
        w = closest_point_on_triangle(P, *t)
        d = np.linalg.norm(w @ t - P)
        if d < best:
            best, best_f, best_w = d, f, w
    return BarycentricCoord(best_f, tuple(best_w))


def evaluate_scene(scene, pred_px, cfg: ExperimentConfig) -> dict:
    topo, lm = scene.topology, scene.landmarker
    pred_px = np.asarray(pred_px, float)
    if pred_px.shape != scene.gt_vertices_px.shape:
        raise InvalidConfig(f"prediction shape {pred_px.shape} does not match scene")
    pred_model = scene.camera.unproject(pred_px)
    gt_model = scene.gt_vertices_3d
    pose = metrics.pose_metrics(landmark_joints(pred_model, lm), scene.gt_joints, pred_model, gt_model,
                                ROOT_JOINT, scene.unit_to_mm)
    H, W = scene.crop
    gj2 = scene.gt_joints_px[:, :2]
    pj2 = landmark_joints(pred_px, lm)[:, :2]
    labeled = synth.in_crop(scene.gt_joints_px, H, W)
    area = float(max(scene.gt_mask.sum(), 1))
    kp = metrics.oks(pj2, gj2, area, cfg.oks_kappa, labeled)
    pairs = [(a.bc, query_surface(pred_px, topo, a.pixel)) for a in scene.annotations]
    cps = metrics.correspondence_pairs([g for g, _ in pairs], [p for _, p in pairs], topo,
                                       kappa=cfg.gps_kappa)
    return {"pose": pose, "oks": kp, "area": area, "pairs": cps}


def run_eval(cfg: ExperimentConfig, pred_dir, out_dir, threads: int = 1):
    t0 = time.perf_counter()
    scenes = load_scenes(cfg)
    paths = [prediction_path(pred_dir, i) for i in range(len(scenes))]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingPredictions(f"missing prediction files: {missing}")
    preds = [load_tensor(p) for p in paths]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        per_scene = list(ex.map(lambda sp: evaluate_scene(sp[0], sp[1], cfg), zip(scenes, preds)))
    pose = {k: float(np.mean([r["pose"][k] for r in per_scene])) for k in ("mpjpe", "pa_mpjpe", "pve")}
    scores = [r["oks"] for r in per_scene]
    kp = {"ap": metrics.threshold_ap(scores), "oks": scores}
    kp["ar"] = kp["ap"]
    dp = metrics.densepose_ap([r["pairs"] for r in per_scene], kappa=cfg.gps_kappa)
    report = {
        **_base_report("eval", cfg),
        "metrics": metrics.metric_report(pose, kp, dp, len(scenes)),
        "per_scene": [{"pose": r["pose"], "oks": r["oks"], "gps": g} for r, g in zip(per_scene, dp["gps"])],
        "predictions": _artifact_checksums(Path(pred_dir), paths),
        WALL_CLOCK_KEY: time.perf_counter() - t0,
    }
    return report, 0


# -- synth -----------------------------------------------------------------------

def run_synth(cfg: ExperimentConfig, out_dir):
    t0 = time.perf_counter()
    out = Path(out_dir)
    written, summary = [], []
    for i in range(cfg.n_scenes):
        scene = synth.generate_scene(cfg.seed + i, cfg.scene_config)
        d = out / f"scene_{i:04d}"
        synth.save_scene(scene, d)
        written += [p for p in d.iterdir() if p.is_file()]
        summary.append({"seed": scene.seed, "visible_vertices": int((scene.visibility_labels == 1).sum()),
                        "mask_pixels": int(scene.gt_mask.sum()), "annotations": len(scene.annotations)})
    report = {**_base_report("synth", cfg), "scenes": summary,
              "artifacts": _artifact_checksums(out, written), WALL_CLOCK_KEY: time.perf_counter() - t0}
    return report, 0


# -- upsampler -------------------------------------------------------------------

UPSAMPLER_DEFAULTS = {"n_train": 100, "n_test": 100, "epochs": 1500, "lr": 0.5, "momentum": 0.9,
                      "schedule": "cosine", "noise": True}


def run_upsampler_train(cfg: ExperimentConfig, out_dir):
    t0 = time.perf_counter()
    u = {**UPSAMPLER_DEFAULTS, **cfg.upsampler}
    unknown = set(u) - set(UPSAMPLER_DEFAULTS) - {"noise_config"}
    if unknown:
        raise InvalidConfig(f"unknown upsampler keys: {sorted(unknown)}")
    noise_cfg = up.NoiseConfig(**u.get("noise_config", {}))
    train, meshes, lm = synth.upsampler_dataset(u["n_train"], cfg.seed)
    test, _, _ = synth.upsampler_dataset(u["n_test"], cfg.seed + 1)
    try:
        params, losses = up.train_upsampler(train, lm, noise_cfg if u["noise"] else None, u["epochs"],
                                            u["lr"], seed=cfg.seed, momentum=u["momentum"],
                                            schedule=u["schedule"])
    except DivergedTraining as e:
        return {**_base_report("upsampler-train", cfg), "error": str(e),
                WALL_CLOCK_KEY: time.perf_counter() - t0}, 1
    bindings = up.build_bindings(meshes[0][0], meshes[0][1], meshes[2][0])
    baseline = float(np.mean([np.abs(up.nearest_upsample(s[0], meshes[0][1], bindings) - s[2]).mean()
                              for s in test]))
    out = Path(out_dir)
    up.save_params(params, out, {"noise": bool(u["noise"])})
    files = [out / f"{n}.mpt" for n in ("A1", "b1", "A2", "b2")] + [out / "params.json"]
    report = {
        **_base_report("upsampler-train", cfg),
        "upsampler": {
            "dims": list(params.dims), "initial_loss": losses[0], "final_loss": losses[-1],
            "test_l1": up.evaluate_l1(params, test),
            "test_l1_noisy": up.evaluate_l1(params, test, noise_cfg, cfg.seed + 2),
            "nearest_baseline_l1": baseline,
        },
        "artifacts": _artifact_checksums(out, files),
        WALL_CLOCK_KEY: time.perf_counter() - t0,
    }
    return report, 0


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get("MPK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfig(f"MPK_THREADS must be an integer, got {env!r}") from None
    return max(1, flag or 1)
