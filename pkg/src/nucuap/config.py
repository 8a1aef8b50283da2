"""INI run configuration: defaults, presets, file loading and flag overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from nucuap.detector import DetectorConfig
from nucuap.errors import ConfigError
from nucuap.losses import EPS_P, LossWeights, RegularizerConfig
from nucuap.scene import SceneSpec, random_scene_spec
from nucuap.solvers import METHODS, AoExpConfig, FwNuclConfig, LoRaPgdConfig

# Defaults match the "pets" preset: moderate regularization, 100 iterations.
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"method": "ao-exp", "seed": "0", "out": "out", "workers": "1"},
    "scene": {
        "height": "64", "width": "64", "channels": "3", "frames": "8",
        "objects": "2", "radius": "7", "speed": "1.0", "intensity": "0.9",
        "background": "0.2", "noise": "0.05",
    },
    "detector": {
        "kernel_size": "11", "kernel_sigma": "2.0", "gain": "8.0", "bias": "-4.0",
        "tau_det": "0.5", "min_area": "9", "aggregation": "mean",
    },
    "loss": {"alpha": "1.0", "beta": "1.0", "gamma": "1.0", "tau": "0.5", "eps_p": repr(EPS_P)},
    "regularizer": {"lambda1": "0.1", "lambda2": "0.01"},
    "ao_exp": {"iterations": "100", "top_k": "full", "eta0": "1.0", "reg_weighting": "weighted"},
    "lora_pgd": {
        "iterations": "100", "rank_frac": "0.1", "nuclear_budget": "60",
        "step": "0.05", "init_scale": "0.01",
    },
    "fw_nucl": {
        "iterations": "30", "epsilon": "40", "line_search": "5",
        "groups": "patch", "patch_size": "16",
    },
}

SECTIONS = tuple(DEFAULTS)


def preset_names() -> list[str]:
    root = resources.files("nucuap") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    path = resources.files("nucuap") / "presets" / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()


def _parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))


@dataclass
class RunConfig:
    method: str
    seed: int
    out: Path
    workers: int
    frames_dir: Path | None
    scene: SceneSpec | None
    detector: DetectorConfig
    weights: LossWeights
    tau: float
    eps_p: float
    regularizer: RegularizerConfig
    ao_exp: AoExpConfig
    lora_pgd: LoRaPgdConfig
    fw_nucl: FwNuclConfig
    parser: configparser.ConfigParser

    def effective_ini(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        """Digest of the effective settings, ignoring where and how wide the run is."""
        p = _parser()
        p.read_string(self.effective_ini())
        p.remove_option("run", "out")
        p.remove_option("run", "workers")
        buf = io.StringIO()
        p.write(buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]

    def solver_config(self):
        if self.method in ("ao-exp", "ao-exp-lora"):
            return self.ao_exp
        if self.method == "lora-pgd":
            return self.lora_pgd
        return self.fw_nucl

    def detector_for(self, channels: int) -> DetectorConfig:
        d = self.detector
        return DetectorConfig(
            kernel_size=d.kernel_size, kernel_sigma=d.kernel_sigma, gain=d.gain,
            bias=d.bias, channels=channels, tau_det=d.tau_det, min_area=d.min_area,
            aggregation=d.aggregation,
        )


def _get(p, section, key, conv):
    raw = p.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _float(x: str) -> float:
    x = x.strip().lower()
    if x in ("inf", "infinity"):
        return math.inf
    return float(x)


def load_config(path=None, overrides: dict | None = None, preset: str | None = None
                ) -> RunConfig:
    """Build a :class:`RunConfig` from defaults, an optional preset, an optional
    INI file and a ``{(section, key): value}`` override mapping, in that order.
    """
    p = _parser()
    p.read_dict(DEFAULTS)
    user = _parser()
    if preset:
        user.read_string(preset_text(preset))
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            user.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in user.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in user.items(section):
            if key not in DEFAULTS[section] and not (section == "run" and key == "frames_dir") \
                    and not (section == "scene" and key == "seed"):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            p.set(section, key, value)

    overrides = dict(overrides or {})
    cli_frames = overrides.get(("run", "frames_dir"))
    if user.has_option("run", "frames_dir") and user.has_section("scene") and not cli_frames:
        raise ConfigError("config names both [run] frames_dir and a [scene] section; pick one")
    for (section, key), value in overrides.items():
        if value is None:
            continue
        p.set(section, key, str(value))

    method = p.get("run", "method")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose one of {', '.join(METHODS)}")
    seed = _get(p, "run", "seed", int)
    frames_dir = p.get("run", "frames_dir", fallback=None) or None
    if frames_dir:
        p.remove_section("scene")
        p.add_section("scene")
    if not p.has_option("scene", "seed") and not frames_dir:
        p.set("scene", "seed", str(seed))

    try:
        scene = None
        if not frames_dir:
            scene = random_scene_spec(
                seed=_get(p, "scene", "seed", int),
                height=_get(p, "scene", "height", int),
                width=_get(p, "scene", "width", int),
                channels=_get(p, "scene", "channels", int),
                frame_count=_get(p, "scene", "frames", int),
                n_objects=_get(p, "scene", "objects", int),
                radius=_get(p, "scene", "radius", float),
                speed=_get(p, "scene", "speed", float),
                intensity=_get(p, "scene", "intensity", float),
                level=_get(p, "scene", "background", float),
                amplitude=_get(p, "scene", "noise", float),
            )
        detector = DetectorConfig(
            kernel_size=_get(p, "detector", "kernel_size", int),
            kernel_sigma=_get(p, "detector", "kernel_sigma", float),
            gain=_get(p, "detector", "gain", float),
            bias=_get(p, "detector", "bias", float),
            tau_det=_get(p, "detector", "tau_det", float),
            min_area=_get(p, "detector", "min_area", int),
            aggregation=p.get("detector", "aggregation"),
        )
        weights = LossWeights(
            _get(p, "loss", "alpha", float),
            _get(p, "loss", "beta", float),
            _get(p, "loss", "gamma", float),
        )
        reg = RegularizerConfig(
            _get(p, "regularizer", "lambda1", float), _get(p, "regularizer", "lambda2", float)
        )
        top_k_raw = p.get("ao_exp", "top_k").strip().lower()
        top_k = None if top_k_raw in ("full", "none", "") else _get(p, "ao_exp", "top_k", int)
        if method == "ao-exp-lora" and top_k is None:
            top_k = 1
        ao = AoExpConfig(
            lambda1=reg.lambda1, lambda2=reg.lambda2,
            iterations=_get(p, "ao_exp", "iterations", int),
            top_k=top_k,
            eta0=_get(p, "ao_exp", "eta0", float),
            reg_weighting=p.get("ao_exp", "reg_weighting"),
        )
        lora = LoRaPgdConfig(
            rank_frac=_get(p, "lora_pgd", "rank_frac", float),
            nuclear_budget=_get(p, "lora_pgd", "nuclear_budget", _float),
            step=_get(p, "lora_pgd", "step", float),
            iterations=_get(p, "lora_pgd", "iterations", int),
            init_scale=_get(p, "lora_pgd", "init_scale", float),
            seed=seed,
        )
        fw = FwNuclConfig(
            epsilon=_get(p, "fw_nucl", "epsilon", float),
            iterations=_get(p, "fw_nucl", "iterations", int),
            line_search=_get(p, "fw_nucl", "line_search", int),
            groups=p.get("fw_nucl", "groups"),
            patch_size=_get(p, "fw_nucl", "patch_size", int),
        )
        tau = _get(p, "loss", "tau", float)
        eps_p = _get(p, "loss", "eps_p", float)
        workers = _get(p, "run", "workers", int)
    except ValueError as exc:  # dataclass validation
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        method=method,
        seed=seed,
        out=Path(p.get("run", "out")),
        workers=max(1, workers),
        frames_dir=Path(frames_dir) if frames_dir else None,
        scene=scene,
        detector=detector,
        weights=weights,
        tau=tau,
        eps_p=eps_p,
        regularizer=reg,
        ao_exp=ao,
        lora_pgd=lora,
        fw_nucl=fw,
        parser=p,
    )
