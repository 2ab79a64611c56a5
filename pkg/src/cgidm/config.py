"""Experiment configuration: flat ``key = value`` text grouped under ``[section]`` headers.

Every recognised key has a typed default below, so an empty file is a valid
config. Unknown sections or keys are rejected with the offending line number.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _words(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(conv):
    def parse(s):
        return None if s.strip().lower() in ("", "none", "auto") else conv(s)
    return parse


def _fill(s):
    return "mean" if s.strip().lower() == "mean" else float(s)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "seed": (int, 0),
        "size": (int, 32),
    },
    "schedule": {
        "T": (int, 100),
        # constant beta; see README "experiment schedule"
        "beta_min": (float, 0.02),
        "beta_max": (float, 0.02),
    },
    "data": {
        "n_styles": (int, 5),
        "per_style": (int, 20),
        "public_per_style": (int, 20),
        "pretrain_styles": (int, 30),
        "pretrain_per_style": (int, 20),
        "dedup_tau": (float, 0.9),
        "import_dir": (_opt(str), None),
    },
    "pretrain": {
        "steps": (int, 8000),
        "batch_size": (int, 32),
        "lr": (float, 1e-3),
        "hidden": (_ints, (256, 256)),
        "time_embed_dim": (int, 16),
    },
    "finetune": {
        "mode": (str, "full_no_prior"),
        "steps_per_image": (int, 50),
        "lr": (_opt(float), None),
        "batch_size": (int, 4),
        "prior_weight": (float, 1.0),
        "prior_set_size": (_opt(int), None),
        "lora_rank": (int, 4),
        "lora_scale": (float, 1.0),
        "defenses": (_words, ()),
        "num_images": (_opt(int), None),
    },
    "mask": {
        "kind": (str, "blockwise"),
        "block": (int, 4),
        "fraction": (float, 0.5),
        "fill": (_fill, "mean"),
        "kernel": (_opt(int), None),
        "sigma": (_opt(float), None),
    },
    "inversion": {
        "methods": (_words, ("cgi", "direct")),
        "N": (int, 1000),
        "budget": (_opt(float), None),
        "step_ratio": (float, 2.0 / 70.0),
        "t_lo": (int, 1),
        "t_hi": (_opt(int), None),
        "keep_ct": (_bool, False),
    },
    "latent": {
        "size": (int, 16),
        "ae_steps": (int, 2000),
    },
    "baseline": {
        "pipelines": (_words, ("img2img",)),
        "K": (int, 16),
        "strength": (float, 0.7),
    },
    "evaluate": {
        "metrics": (_words, ("cosine", "ssim")),
        "sources": (_words, ()),  # empty: every source found on disk
    },
    "mia": {
        "t_list": (_ints, (10, 30, 50, 70, 90)),
        "n_noise": (int, 8),
    },
    "sweep": {
        "axis": (str, "extraction_steps"),
        "values": (_words, ("50", "200", "1000")),
    },
}

SWEEP_AXES = ("train_steps", "num_images", "mask_kind", "extraction_steps")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        full = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in self.values.items():
            full[s].update(kv)
        self.values = full
        self.validate()

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, dotted: str):
        s, k = dotted.split(".")
        return self.values[s][k]

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides applied."""
        vals = json.loads(json.dumps(self.values))
        for name, v in dotted.items():
            s, k = name.split("__")
            if s not in SCHEMA or k not in SCHEMA[s]:
                raise ConfigError(f"unknown config key {s}.{k}")
            vals[s][k] = v
        return ExperimentConfig(_retuple(vals), self.source)

    def validate(self) -> None:
        v = self.values
        if v["experiment"]["size"] < 8 or v["experiment"]["size"] % 8:
            raise ConfigError("experiment.size must be a positive multiple of 8")
        if v["data"]["per_style"] < 2:
            raise ConfigError("data.per_style must be >= 2")
        if v["finetune"]["mode"] not in ("full_no_prior", "full_with_prior", "lora"):
            raise ConfigError(f"finetune.mode: unknown mode {v['finetune']['mode']!r}")
        if v["mask"]["kind"] not in ("blur", "half", "blockwise"):
            raise ConfigError(f"mask.kind: unknown kind {v['mask']['kind']!r}")
        for m in v["inversion"]["methods"]:
            if m not in ("cgi", "direct", "latent"):
                raise ConfigError(f"inversion.methods: unknown method {m!r}")
        for p in v["baseline"]["pipelines"]:
            if p not in ("text2img", "img2img", "inpaint"):
                raise ConfigError(f"baseline.pipelines: unknown pipeline {p!r}")
        for m in v["evaluate"]["metrics"]:
            if m not in ("cosine", "ssim"):
                raise ConfigError(f"evaluate.metrics: unknown metric {m!r}")
        if v["sweep"]["axis"] not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        if v["baseline"]["K"] < 1:
            raise ConfigError("baseline.K must be >= 1")
        if v["latent"]["size"] < 1 or v["experiment"]["size"] % v["latent"]["size"]:
            raise ConfigError("latent.size must divide experiment.size")

    def canonical(self, sections=None) -> str:
        sections = sorted(SCHEMA) if sections is None else sections
        return json.dumps({s: self.values[s] for s in sections}, sort_keys=True, default=list)

    def hash(self, sections=None) -> str:
        return hashlib.sha256(self.canonical(sections).encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for s in SCHEMA:
            lines.append(f"[{s}]")
            for k, val in self.values[s].items():
                lines.append(f"{k} = {_render(val)}")
            lines.append("")
        return "\n".join(lines)


def _render(val):
    if val is None:
        return "none"
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (tuple, list)):
        return ", ".join(str(x) for x in val)
    return repr(val) if isinstance(val, float) else str(val)


def _retuple(vals):
    for s, keys in SCHEMA.items():
        for k, (_, d) in keys.items():
            if isinstance(d, tuple) and isinstance(vals[s][k], list):
                vals[s][k] = tuple(vals[s][k])
    return vals


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any [section]")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} in [{section}]")
        conv = SCHEMA[section][key][0]
        try:
            values[section][key] = conv(val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {e}") from None
    try:
        return ExperimentConfig(values, source)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
