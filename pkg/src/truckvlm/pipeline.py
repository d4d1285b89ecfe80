"""Stage-by-stage orchestration over a run directory.

Every stage reads only the artifacts written by earlier stages, so any
stage can be re-run on its own. Run directory layout::

    config.ini                      effective configuration
    background.txt                  sector-grid background model
    foreground/frame_NNNNN.txt      "x y z src_row" foreground points
    tracks.txt, track_members.txt   track dump and per-record point rows
    clouds/track_<id>.xyz           reconstructed cloud (+ .meta.json)
    images/track_<id>_<variant>.pgm original / processed side views
    labels.csv                      ground truth per track id
    results/<variant>_k<k>.jsonl    one record per query
    reports/<variant>_k<k>.json     per-class F1 report
    table.txt, comparison.txt       text summaries
    manifest.json                   every file and the stage that made it
"""

from __future__ import annotations

import collections
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import background as bgm
from . import imaging, io, synth, tracking
from .config import PipelineConfig, write_config
from .evaluation import (
    LabeledPrediction, compare_runs, f1_report, format_comparison, format_table,
    read_ground_truth, write_ground_truth,
)
from .prompting import (
    ClassLabel, Demonstration, build_prompt, default_answer_format, load_aliases, render_instruction,
    select_demonstrations,
)
from .registration import RegistrationParams, load_cloud, reconstruct_track
from .vlm_client import (
    AspectRule, MockBackend, RemoteBackend, RetryPolicy, TableRule, UniformRule, aspect_anchors_from_dims,
    classify_all, read_records, write_records,
)

logger = logging.getLogger(__name__)

STAGES = ("learn-bg", "extract", "track", "reconstruct", "render", "labels", "classify", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class _Stage:
    """Context manager tagging any failure with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        raise StageError(self.name, f"{type(exc).__name__}: {exc}") from exc


# --- manifest ----------------------------------------------------------------

class Manifest:
    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.files = {}
        if self.path.exists():
            self.files = {f["path"]: f["stage"] for f in json.loads(self.path.read_text())["files"]}

    def add(self, stage: str, *paths) -> None:
        for p in paths:
            self.files[Path(p).relative_to(self.root).as_posix()] = stage

    def save(self) -> None:
        files = [{"path": k, "stage": v} for k, v in sorted(self.files.items())]
        body = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "files": files}
        self.path.write_text(json.dumps(body, indent=2) + "\n")


def _record(out, stage, *paths):
    m = Manifest(out)
    m.add(stage, *paths)
    m.save()


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def _fresh_dir(path: Path, pattern: str) -> Path:
    """Create ``path`` and drop outputs of an earlier run so they cannot leak in."""
    path.mkdir(parents=True, exist_ok=True)
    for old in path.glob(pattern):
        old.unlink()
    return path


def _grid(cfg: PipelineConfig) -> bgm.SectorGrid:
    return bgm.SectorGrid(cfg.azimuth_bins, cfg.elevation_bins, cfg.elevation_min_deg, cfg.elevation_max_deg)


# --- stages ------------------------------------------------------------------

def learn_bg(cfg: PipelineConfig, frames_dir, out) -> Path:
    out = Path(out)
    with _Stage("learn-bg"):
        frames = io.ingest_frames(frames_dir, cfg.frame_dt)
        model = bgm.learn_background(frames, _grid(cfg), cfg.bg_percentile, cfg.bg_min_observations)
        path = out / "background.txt"
        model.save(path)
        logger.info("background from %d frames, %d occupied cells", len(frames), int(model.occupied.sum()))
    _record(out, "learn-bg", path)
    return path


def extract(cfg: PipelineConfig, frames_dir, out, model_path=None) -> Path:
    out = Path(out)
    with _Stage("extract"):
        model = bgm.BackgroundModel.load(model_path or out / "background.txt")
        frames = io.ingest_frames(frames_dir, cfg.frame_dt)
        fg_dir = _fresh_dir(out / "foreground", "frame_*.txt")
        written = []
        for k, frame in enumerate(frames):
            mask = bgm.foreground_mask(frame.points, model, cfg.fg_margin)
            rows = np.flatnonzero(mask)
            path = fg_dir / f"frame_{k:05d}.txt"
            io.write_frame(path, frame.points[rows], frame.timestamp, rows[:, None])
            written.append(path)
    _record(out, "extract", *written)
    return fg_dir


def _read_foreground(fg_dir):
    out = []
    for f in io.frame_files(fg_dir):
        frame, extra = io.read_frame(f, columns=4)
        out.append((frame, extra[:, 0]))
    return out


def track(cfg: PipelineConfig, out) -> Path:
    out = Path(out)
    with _Stage("track"):
        fg = _read_foreground(out / "foreground")
        tracker, _ = tracking.track_frames(
            [f.points for f, _ in fg], [f.timestamp for f, _ in fg], cfg.dbscan_eps, cfg.dbscan_min_pts,
            gate=cfg.sort_gate, max_age=cfg.sort_max_age, min_hits=cfg.sort_min_hits, q_pos=cfg.kalman_q_pos,
            q_vel=cfg.kalman_q_vel, r=cfg.kalman_r, velocity_var=cfg.kalman_velocity_var,
        )
        dump, members = out / "tracks.txt", out / "track_members.txt"
        tracking.write_track_dump(tracker.tracks, dump, members)
        logger.info("%d tracks, %d confirmed", len(tracker.tracks), len(tracker.confirmed_tracks()))
    _record(out, "track", dump, members)
    return dump


def _confirmed_ids(out) -> list[int]:
    rows = tracking.read_track_dump(Path(out) / "tracks.txt")
    return sorted({r["track_id"] for r in rows if r["confirmed"]})


def _reconstruct_one(tid, clouds, params, path):
    rc = reconstruct_track(clouds, params=params)
    rc.save(path)
    return len(rc.points), rc.skipped


def reconstruct(cfg: PipelineConfig, out) -> Path:
    out = Path(out)
    with _Stage("reconstruct"):
        fg = _read_foreground(out / "foreground")
        members = tracking.read_track_members(out / "track_members.txt")
        cloud_dir = _fresh_dir(out / "clouds", "track_*")
        params = RegistrationParams(cfg.icp_max_iter, cfg.icp_tol, cfg.icp_reject, cfg.icp_trim, cfg.normal_k)
        work = []
        for tid in _confirmed_ids(out):
            clouds = [fg[f][0].points[idx] for f, idx in members[tid]]
            if sum(len(c) for c in clouds) < cfg.min_track_points:
                logger.info("track %d: too few points, not reconstructed", tid)
                continue
            work.append((tid, clouds, params, cloud_dir / f"track_{tid}.xyz"))
        results = _map(_reconstruct_one, work, cfg.jobs)
        written = []
        for (tid, _, _, path), (n, skipped) in zip(work, results):
            if skipped:
                logger.warning("track %d: %d frame(s) skipped during registration", tid, len(skipped))
            written += [path, Path(str(path) + ".meta.json")]
    _record(out, "reconstruct", *written)
    return cloud_dir


def _travel_axes(out) -> dict[int, np.ndarray]:
    """Per-track unit direction of travel from first to last box centroid."""
    by_track = collections.defaultdict(list)
    for r in tracking.read_track_dump(Path(out) / "tracks.txt"):
        by_track[r["track_id"]].append(r)
    axes = {}
    for tid, rows in by_track.items():
        d = np.array([rows[-1]["cx"] - rows[0]["cx"], rows[-1]["cy"] - rows[0]["cy"]])
        if np.linalg.norm(d) < 1e-6:  # parked: fall back to the box's long axis
            h = rows[-1]["heading"]
            d = np.array([np.cos(h), np.sin(h)])
        axes[tid] = d / np.linalg.norm(d)
    return axes


def render_images(cloud, cfg: PipelineConfig, travel_axis=None) -> dict[str, imaging.RasterImage]:
    """``original`` = plain projection; ``processed`` = outlier removal, projection, opening."""
    original = imaging.project_to_image(cloud, cfg.image_view, cfg.image_scale, cfg.image_padding, travel_axis)
    clean = cloud
    if len(cloud) > cfg.sor_k:
        clean = imaging.statistical_outlier_removal(cloud, cfg.sor_k, cfg.sor_std_ratio)
    projected = imaging.project_to_image(clean, cfg.image_view, cfg.image_scale, cfg.image_padding, travel_axis)
    processed = imaging.opening(projected, imaging.StructuringElement.square(cfg.se_size))
    return {"original": original, "processed": processed}


def _render_one(path, cfg, axis, image_dir, tid):
    pts, _ = load_cloud(path)
    imgs = render_images(pts, cfg, axis)
    written = []
    for variant, img in imgs.items():
        if not img.lit.any():
            logger.warning("track %d: %s image is empty", tid, variant)
        p = image_dir / f"track_{tid}_{variant}.pgm"
        img.save(p)
        written.append(p)
    return written


def render(cfg: PipelineConfig, out) -> Path:
    out = Path(out)
    with _Stage("render"):
        image_dir = _fresh_dir(out / "images", "track_*.pgm")
        axes = _travel_axes(out)
        work = []
        for path in sorted((out / "clouds").glob("track_*.xyz"), key=_track_id):
            tid = _track_id(path)
            work.append((path, cfg, axes.get(tid), image_dir, tid))
        written = [p for ps in _map(_render_one, work, cfg.jobs) for p in ps]
    _record(out, "render", *written)
    return image_dir


def _track_id(path) -> int:
    return int(Path(path).name.split("_")[1].split(".")[0])


def labels_from_truth(out, truth_dir) -> dict[str, ClassLabel]:
    """Majority vote of true vehicle ids over each confirmed track's points."""
    memberships = synth.read_memberships(truth_dir)
    vehicle_labels = synth.read_vehicle_labels(truth_dir)
    fg = _read_foreground(Path(out) / "foreground")
    members = tracking.read_track_members(Path(out) / "track_members.txt")
    labels = {}
    for tid in _confirmed_ids(out):
        votes = collections.Counter()
        for f, idx in members[tid]:
            votes.update(memberships[f][fg[f][1][idx]].tolist())
        vid, _ = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
        if vid < 0:
            logger.info("track %d is mostly background; left unlabeled", tid)
            continue
        labels[str(tid)] = vehicle_labels[vid]
    return labels


def make_labels(cfg: PipelineConfig, out, labels_path=None, truth_dir=None) -> Path:
    out = Path(out)
    with _Stage("labels"):
        if labels_path:
            labels = read_ground_truth(labels_path)
        elif truth_dir:
            labels = labels_from_truth(out, truth_dir)
        else:
            raise ValueError("need a labels file or a ground-truth directory")
        path = out / "labels.csv"
        write_ground_truth(labels, path)
    _record(out, "labels", path)
    return path


def _load_images(out, variant) -> dict[str, imaging.RasterImage]:
    imgs = {}
    for p in sorted((Path(out) / "images").glob(f"track_*_{variant}.pgm")):
        imgs[str(_track_id(p))] = imaging.read_pgm(p)
    return imgs


def make_backend(cfg: PipelineConfig, out, labels=None):
    if cfg.backend == "remote":
        return RemoteBackend(cfg.remote_endpoint, cfg.remote_model, timeout=cfg.remote_timeout)
    if cfg.mock_rule == "uniform":
        rule = UniformRule()
    elif cfg.mock_rule == "aspect":
        rule = AspectRule(aspect_anchors_from_dims(synth.CLASS_ARCHETYPES))
    elif cfg.mock_rule == "table":
        rule = TableRule.load(cfg.mock_table)
    else:  # oracle: every rendered image answers with its track's true label
        labels = labels if labels is not None else read_ground_truth(Path(out) / "labels.csv")
        table = {}
        for variant in ("original", "processed"):
            for tid, img in _load_images(out, variant).items():
                if tid in labels and img.lit.any():
                    table[img.fingerprint()] = labels[tid]
        rule = TableRule(table)
    return MockBackend(rule)


def queries_for(pool: list[Demonstration], images: dict, k: int, seed: int, instruction: str,
                answer_format: str | None = None):
    """Leave-one-out prompts: each query's demonstrations exclude the query track."""
    if k > len(pool) - 1:
        raise ValueError(f"k={k} needs at least {k + 1} labeled tracks, have {len(pool)}")
    items, demo_ids = [], {}
    for demo in pool:
        qid = demo.source_id
        query = images[qid]
        if not query.lit.any():
            continue
        rest = [d for d in pool if d.source_id != qid]
        demos = select_demonstrations(rest, k, seed, instruction)
        items.append((qid, build_prompt(demos, query, answer_format=answer_format)))
        demo_ids[qid] = [d.source_id for d in demos.demonstrations]
    return items, demo_ids


def classify(cfg: PipelineConfig, out, backend=None) -> Path:
    out = Path(out)
    with _Stage("classify"):
        labels = read_ground_truth(out / "labels.csv")
        backend = backend or make_backend(cfg, out, labels)
        policy = RetryPolicy(cfg.retry_base_delay, 2.0, cfg.max_retries)
        answer_format = (Path(cfg.answer_format).read_text(encoding="utf-8").strip()
                         if cfg.answer_format else default_answer_format())
        template = Path(cfg.instruction_template).read_text(encoding="utf-8") if cfg.instruction_template else None
        instruction = render_instruction(template, answer_format=answer_format)
        aliases = load_aliases(cfg.aliases or None)
        res_dir = out / "results"
        res_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for variant in cfg.variant_list:
            images = _load_images(out, variant)
            pool = [Demonstration(images[t], labels[t], t) for t in sorted(labels, key=int) if t in images]
            if not pool:
                raise ValueError(f"no labeled {variant} images")
            for k in cfg.shot_list:
                items, demo_ids = queries_for(pool, images, k, cfg.seed, instruction, answer_format)
                results = classify_all(items, backend, cfg.batch_count, policy, cfg.max_in_flight, aliases)
                path = res_dir / f"{variant}_k{k}.jsonl"
                path.unlink(missing_ok=True)
                write_records(results, path)
                written.append(path)
                (res_dir / f"{variant}_k{k}.demos.json").write_text(json.dumps(demo_ids, indent=2, sort_keys=True) + "\n")
                written.append(res_dir / f"{variant}_k{k}.demos.json")
    _record(out, "classify", *written)
    return res_dir


def evaluate(cfg: PipelineConfig, out) -> dict:
    """Score every results file; returns {(variant, k): Report}."""
    out = Path(out)
    with _Stage("evaluate"):
        labels = read_ground_truth(out / "labels.csv")
        rep_dir = out / "reports"
        rep_dir.mkdir(parents=True, exist_ok=True)
        reports, written = {}, []
        for variant in cfg.variant_list:
            for k in cfg.shot_list:
                records = read_records(out / "results" / f"{variant}_k{k}.jsonl")
                preds = [
                    LabeledPrediction(r["id"], labels[r["id"]], ClassLabel(r["label"]) if r["label"] else None)
                    for r in records
                ]
                report = f1_report(preds, variant=variant, shots=k, seed=cfg.seed, backend=cfg.backend,
                                   mock_rule=cfg.mock_rule if cfg.backend == "mock" else None,
                                   n_queries=len(preds))
                path = rep_dir / f"{variant}_k{k}.json"
                report.save(path)
                written.append(path)
                reports[(variant, k)] = report
        if {"processed", "original"} <= set(cfg.variant_list):
            proc = {k: reports[("processed", k)] for k in cfg.shot_list}
            orig = {k: reports[("original", k)] for k in cfg.shot_list}
            (out / "table.txt").write_text(format_table(proc, orig))
            parts = []
            for k in cfg.shot_list:
                parts.append(f"{k} shot\n" + format_comparison(compare_runs(proc[k], orig[k])))
            (out / "comparison.txt").write_text("\n".join(parts))
            written += [out / "table.txt", out / "comparison.txt"]
    _record(out, "evaluate", *written)
    return reports


# --- whole pipeline ----------------------------------------------------------

@dataclass
class RunInputs:
    frames: Path
    background: Path
    labels: Path | None = None
    truth: Path | None = None

    @classmethod
    def discover(cls, input_dir) -> RunInputs:
        """``frames/`` (or the directory itself), optional ``background/``,
        ``labels.csv`` and ``truth/``."""
        d = Path(input_dir)
        frames = d / "frames" if (d / "frames").is_dir() else d
        bg = d / "background" if (d / "background").is_dir() else frames
        labels = d / "labels.csv" if (d / "labels.csv").is_file() else None
        truth = d / "truth" if (d / "truth").is_dir() else None
        return cls(frames, bg, labels, truth)


def run_pipeline(cfg: PipelineConfig, input_dir, out_dir, backend=None) -> dict:
    inputs = RunInputs.discover(input_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").unlink(missing_ok=True)
    write_config(cfg, out / "config.ini")
    _record(out, "run", out / "config.ini")
    learn_bg(cfg, inputs.background, out)
    extract(cfg, inputs.frames, out)
    track(cfg, out)
    reconstruct(cfg, out)
    render(cfg, out)
    make_labels(cfg, out, inputs.labels, inputs.truth)
    classify(cfg, out, backend)
    return evaluate(cfg, out)


__all__ = [
    "Manifest", "RunInputs", "STAGES", "StageError", "classify", "evaluate", "extract",
    "labels_from_truth", "learn_bg", "make_backend", "make_labels", "queries_for", "reconstruct", "render",
    "render_images", "run_pipeline", "track",
]
