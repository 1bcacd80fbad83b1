"""Experiment configuration: a flat dataclass, an INI file codec, and presets.

Config precedence is defaults < config file < command-line flags; whatever a
run resolves to is written back into its output directory as ``resolved.cfg``
so any artifact can be regenerated from the snapshot plus the dataset
manifest.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

MODES = ("source_only", "st", "dann", "wst", "bsr", "bsr_wst")
SELF_TRAIN_MODES = ("st", "wst")


@dataclass
class TrainConfig:
    # [run]
    mode: str = "source_only"
    seed: int = 0
    dataset_root: str = ""
    init_checkpoint: str = ""
    iterations: int = 6000
    eval_interval: int = 500
    half_size: int = 16
    augment: bool = True
    # [detector]
    match_iou: float = 0.5
    nms_iou: float = 0.45
    eval_conf: float = 0.05
    eval_iou: float = 0.5
    # [optimizer]
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (4000, 5000)
    decay_factor: float = 0.1
    # [bsr]
    bsr_t: float = 0.5
    bsr_gamma: float = 2.0
    bsr_multiplier: int = 3
    bsr_detach_focal: bool = True
    bsr_weight: float = 1.0
    grl_lambda: float = 1.0
    # [selftrain]
    srrs_delta: float = 0.5
    srrs_epsilon: float = 0.8
    schedule_scope: str = "window"   # "window" | "run"
    pl_conf: float = 0.05            # candidate confidence floor for reliability-scored labels
    st_conf: float = 0.5             # confidence cutoff when reliability scoring is off
    st_lr: float = 1e-5              # learning rate inside self-training phases
    wst_start_frac: float = 10.0 / 11.0
    wst_end_frac: float = 1.0
    # [ablation]  tri-state: "auto" resolves from the mode
    use_srrs: str = "auto"
    mask_all_negatives: str = "auto"
    weak_mask: str = "auto"

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choices: {MODES}")
        if self.iterations < 1 or self.eval_interval < 1 or self.half_size < 1:
            raise ValueError("iterations, eval_interval and half_size must be positive")
        if not (0.0 <= self.wst_start_frac < self.wst_end_frac <= 1.0):
            raise ValueError("WST window fractions must satisfy 0 <= start < end <= 1")
        if self.schedule_scope not in ("window", "run"):
            raise ValueError("schedule_scope must be 'window' or 'run'")
        for name in ("use_srrs", "mask_all_negatives", "weak_mask"):
            if getattr(self, name) not in ("auto", "true", "false"):
                raise ValueError(f"{name} must be one of auto/true/false")
        return self

    # -- derived views -----------------------------------------------------

    def batch_shape(self) -> tuple[int, int]:
        """(source half, target half) sizes implied by the mode."""
        if self.mode == "source_only":
            return 2 * self.half_size, 0
        if self.mode in SELF_TRAIN_MODES:
            return 0, 2 * self.half_size
        return self.half_size, self.half_size

    def toggles(self) -> tuple[bool, bool, bool]:
        """Resolved (use_srrs, mask_all_negatives, weak_mask)."""
        defaults = {
            "st": (False, False, False),
            "wst": (True, False, True),
            "bsr_wst": (True, False, True),
        }.get(self.mode, (False, False, False))
        tri = (self.use_srrs, self.mask_all_negatives, self.weak_mask)
        return tuple(d if v == "auto" else v == "true" for v, d in zip(tri, defaults))

    def wst_window(self) -> tuple[int, int]:
        """Inclusive iteration window [start, end] for the self-training phase."""
        start = int(self.iterations * self.wst_start_frac) + 1
        end = int(self.iterations * self.wst_end_frac)
        return min(start, end), end


_SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("mode", "seed", "dataset_root", "init_checkpoint", "iterations",
            "eval_interval", "half_size", "augment"),
    "detector": ("match_iou", "nms_iou", "eval_conf", "eval_iou"),
    "optimizer": ("lr", "momentum", "weight_decay", "milestones", "decay_factor"),
    "bsr": ("bsr_t", "bsr_gamma", "bsr_multiplier", "bsr_detach_focal",
            "bsr_weight", "grl_lambda"),
    "selftrain": ("srrs_delta", "srrs_epsilon", "schedule_scope", "pl_conf",
                  "st_conf", "st_lr", "wst_start_frac", "wst_end_frac"),
    "ablation": ("use_srrs", "mask_all_negatives", "weak_mask"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, text: str):
    ftype = _FIELD_TYPES[name]
    text = text.strip()
    if ftype == "bool":
        if text.lower() not in ("true", "false"):
            raise ValueError(f"field {name} expects true/false, got {text!r}")
        return text.lower() == "true"
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype.startswith("tuple"):
        return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()
    return text


def save_config(cfg: TrainConfig, path: str | Path) -> Path:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {name: _format(getattr(cfg, name)) for name in names}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = TrainConfig(**asdict(base)) if base else TrainConfig()
    known = {name for names in _SECTIONS.values() for name in names}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in known or key not in _SECTIONS[section]:
                raise ValueError(f"unknown config key {key!r} in section [{section}]")
            setattr(cfg, key, _parse(key, value))
    return cfg.validate()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset(name: str, mode: str) -> TrainConfig:
    """Named experiment presets.

    ``paper-protocol`` keeps the published schedule structure rescaled to the
    toy budget (6k base iterations, adversarial phase 3k + 0.6k decay tail,
    self-training in the final stretch).  ``toy-adaptation`` is the shipped
    small-budget benchmark configuration used by the acceptance experiment;
    ``smoke`` is for fast mechanical checks.
    """
    if name == "paper-protocol":
        cfg = TrainConfig(mode=mode)
        if mode == "source_only":
            cfg.iterations, cfg.eval_interval = 6000, 500
            cfg.milestones = (4000, 5000)
        elif mode in ("bsr", "dann"):
            cfg.iterations, cfg.eval_interval = 3600, 300
            cfg.milestones = (3000,)
        elif mode == "bsr_wst":
            cfg.iterations, cfg.eval_interval = 3300, 300
            cfg.milestones = (3000,)
            cfg.wst_start_frac, cfg.wst_end_frac = 10.0 / 11.0, 1.0
        else:  # st / wst fine-tuning phases
            cfg.iterations, cfg.eval_interval = 200, 10
            cfg.milestones = ()
            cfg.lr = cfg.st_lr
        return cfg.validate()

    if name == "toy-adaptation":
        cfg = TrainConfig(mode=mode, half_size=16)
        if mode == "source_only":
            cfg.iterations, cfg.eval_interval = 1200, 200
            cfg.milestones = (800, 1000)
        elif mode in ("bsr", "dann"):
            cfg.iterations, cfg.eval_interval = 660, 60
            cfg.milestones = (550,)
        elif mode == "bsr_wst":
            cfg.iterations, cfg.eval_interval = 660, 60
            cfg.milestones = (550,)
            cfg.wst_start_frac, cfg.wst_end_frac = 10.0 / 11.0, 1.0
        else:  # st / wst
            cfg.iterations, cfg.eval_interval = 150, 10
            cfg.milestones = ()
            cfg.lr = 2e-4
            cfg.st_lr = 2e-4
        return cfg.validate()

    if name == "smoke":
        cfg = TrainConfig(mode=mode, half_size=4, iterations=12, eval_interval=6,
                          milestones=(), wst_start_frac=0.5)
        return cfg.validate()

    raise ValueError(f"unknown preset {name!r}; choices: paper-protocol, toy-adaptation, smoke")
