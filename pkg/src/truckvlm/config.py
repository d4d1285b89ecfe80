"""Pipeline configuration: one flat record of every tunable.

Values come from defaults, then an optional INI file (``[pipeline]``
section), then command-line flags. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

BACKENDS = ("mock", "remote")
MOCK_RULES = ("oracle", "uniform", "aspect", "table")
VIEWS = ("side", "top")
VARIANTS = ("processed", "original")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    frame_dt: float = 0.1

    # background
    azimuth_bins: int = 1800
    elevation_bins: int = 32
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 15.0
    bg_percentile: float = 5.0
    bg_min_observations: int = 3
    fg_margin: float = 0.5

    # clustering / tracking
    dbscan_eps: float = 1.2
    dbscan_min_pts: int = 5
    sort_gate: float = 4.0
    sort_max_age: int = 3
    sort_min_hits: int = 3
    kalman_q_pos: float = 0.01
    kalman_q_vel: float = 1.0
    kalman_r: float = 0.04
    kalman_velocity_var: float = 100.0
    min_track_points: int = 30

    # registration
    icp_max_iter: int = 50
    icp_tol: float = 1e-5
    icp_reject: float = 1.0
    icp_trim: float = 0.9
    normal_k: int = 12

    # imaging
    image_view: str = "side"
    image_scale: float = 0.05
    image_padding: int = 10
    se_size: int = 3
    sor_k: int = 16
    sor_std_ratio: float = 2.0

    # prompting / classification
    shots: str = "3"  # comma list, e.g. "1,3,5,7,9"
    instruction_template: str = ""  # path; empty = packaged default
    answer_format: str = ""  # path; empty = packaged default
    aliases: str = ""  # path; empty = packaged default
    variants: str = "processed,original"
    batch_count: int = 5
    max_in_flight: int = 4
    retry_base_delay: float = 1.0
    max_retries: int = 3
    backend: str = "mock"
    mock_rule: str = "oracle"
    mock_table: str = ""
    remote_endpoint: str = ""
    remote_model: str = ""
    remote_timeout: float = 60.0

    def __post_init__(self):
        for err in self.problems():
            raise ValueError(err)

    # --- validation --------------------------------------------------------

    def problems(self) -> list[str]:
        out = []

        def need(cond, msg):
            if not cond:
                out.append(msg)

        need(self.jobs >= 1, "jobs must be >= 1")
        need(self.frame_dt > 0, "frame_dt must be > 0")
        need(self.azimuth_bins >= 1 and self.elevation_bins >= 1, "bin counts must be >= 1")
        need(self.elevation_min_deg < self.elevation_max_deg, "elevation_min_deg must be < elevation_max_deg")
        need(-90 <= self.elevation_min_deg and self.elevation_max_deg <= 90, "elevations must lie in [-90, 90]")
        need(0 <= self.bg_percentile <= 100, "bg_percentile must be in [0, 100]")
        need(self.bg_min_observations >= 1, "bg_min_observations must be >= 1")
        need(self.fg_margin > 0, "fg_margin must be > 0")
        need(self.dbscan_eps > 0, "dbscan_eps must be > 0")
        need(self.dbscan_min_pts >= 1, "dbscan_min_pts must be >= 1")
        need(self.sort_gate > 0, "sort_gate must be > 0")
        need(self.sort_max_age >= 0, "sort_max_age must be >= 0")
        need(self.sort_min_hits >= 1, "sort_min_hits must be >= 1")
        need(min(self.kalman_q_pos, self.kalman_q_vel) >= 0, "kalman process noise must be >= 0")
        need(self.kalman_r > 0, "kalman_r must be > 0")
        need(self.kalman_velocity_var > 0, "kalman_velocity_var must be > 0")
        need(self.min_track_points >= 1, "min_track_points must be >= 1")
        need(self.icp_max_iter >= 1, "icp_max_iter must be >= 1")
        need(self.icp_tol > 0, "icp_tol must be > 0")
        need(self.icp_reject > 0, "icp_reject must be > 0")
        need(0 < self.icp_trim <= 1, "icp_trim must be in (0, 1]")
        need(self.normal_k >= 3, "normal_k must be >= 3")
        need(self.image_view in VIEWS, f"image_view must be one of {VIEWS}")
        need(self.image_scale > 0, "image_scale must be > 0")
        need(self.image_padding >= 0, "image_padding must be >= 0")
        need(self.se_size >= 1 and self.se_size % 2 == 1, "se_size must be odd and >= 1")
        need(self.sor_k >= 1, "sor_k must be >= 1")
        need(self.sor_std_ratio > 0, "sor_std_ratio must be > 0")
        try:
            shots = self.shot_list
            need(bool(shots) and all(s >= 0 for s in shots), "shots must be a non-empty list of k >= 0")
        except ValueError:
            out.append(f"shots must be a comma list of integers, got {self.shots!r}")
        variants = self.variant_list
        need(bool(variants) and all(v in VARIANTS for v in variants), f"variants must be drawn from {VARIANTS}")
        need(self.batch_count >= 1, "batch_count must be >= 1")
        need(self.max_in_flight >= 1, "max_in_flight must be >= 1")
        need(self.retry_base_delay >= 0, "retry_base_delay must be >= 0")
        need(self.max_retries >= 0, "max_retries must be >= 0")
        need(self.backend in BACKENDS, f"backend must be one of {BACKENDS}")
        need(self.mock_rule in MOCK_RULES, f"mock_rule must be one of {MOCK_RULES}")
        need(self.mock_rule != "table" or bool(self.mock_table), "mock_rule=table needs mock_table")
        need(self.remote_timeout > 0, "remote_timeout must be > 0")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                out.append(f"{f.name} must be finite")
        return out

    @property
    def shot_list(self) -> list[int]:
        return [int(s) for s in str(self.shots).split(",") if s.strip()]

    @property
    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]

    # --- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in config_fields()}

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        lines = ["[pipeline]"]
        lines.extend(f"{k} = {v}" for k, v in self.to_dict().items())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict, base: PipelineConfig | None = None) -> PipelineConfig:
        known = {f.name: f for f in config_fields()}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {k: _coerce(known[k], v) for k, v in values.items()}
        return dataclasses.replace(base or cls(), **parsed)

    @classmethod
    def load(cls, path, base: PipelineConfig | None = None) -> PipelineConfig:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case so typos are not silently folded
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        extra = [s for s in parser.sections() if s != "pipeline"]
        if extra:
            raise ValueError(f"{path}: unknown section(s): {', '.join(extra)}")
        values = dict(parser["pipeline"]) if parser.has_section("pipeline") else {}
        return cls.from_mapping(values, base)


def config_fields():
    return list(dataclasses.fields(PipelineConfig))


def _field_type(f) -> type:
    return {"int": int, "float": float, "str": str}[f.type]


def _coerce(f, value):
    kind = _field_type(f)
    if isinstance(value, kind) and not isinstance(value, bool):
        return value
    text = str(value).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ValueError(f"{f.name}: expected {kind.__name__}, got {text!r}") from None
    return text


# --- command-line integration ------------------------------------------------

def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """``--config`` plus one ``--key`` flag per config field."""
    parser.add_argument("--config", metavar="INI", help="config file with a [pipeline] section")
    group = parser.add_argument_group("pipeline settings (override the config file)")
    for f in config_fields():
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", metavar=_field_type(f).__name__.upper(),
                           default=None, help=f"default: {f.default}")


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for f in config_fields():
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = v
    return PipelineConfig.from_mapping(overrides, cfg) if overrides else cfg


def write_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.to_ini(), encoding="utf-8")
