"""Seeded synthetic trend datasets with taxonomy and group affiliation structure.

Every leaf element series for a fine group is a scaled seasonal signal::

    share * (level * group_level + trend * t
             + amplitude * amp_scale * sin(2 pi pos / P + phase + phase_shift + group_phase))

Parent elements are the share-weighted sum of their children and coarse
groups are the weight-weighted mixture of their fine groups, both computed
from the noiseless signals; each series then receives its own Gaussian
noise and is clipped to [0, 1].
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import STEPS_PER_YEAR, Dataset, FashionElement, TrendSeries, UserGroup
from .errors import ConfigError

_DEPTH_KIND = ("category", "attribute", "attribute_value")


@dataclass
class SynthConfig:
    categories: list
    groups: list
    steps: int = 120
    step_period: str = "half_month"
    noise: float = 0.01
    parent_noise: float = 0.005
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        try:
            cfg = cls(categories=d["categories"], groups=d["groups"],
                      steps=int(d.get("steps", 120)),
                      step_period=d.get("step_period", "half_month"),
                      noise=float(d.get("noise", 0.01)),
                      parent_noise=float(d.get("parent_noise", 0.005)))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad synth config: {err}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"synth config {p} not found")
        try:
            return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: {err}") from None

    def to_dict(self):
        return {"steps": self.steps, "step_period": self.step_period, "noise": self.noise,
                "parent_noise": self.parent_noise, "categories": self.categories,
                "groups": self.groups}

    @property
    def steps_per_year(self):
        return STEPS_PER_YEAR[self.step_period]

    def validate(self):
        if self.step_period not in STEPS_PER_YEAR:
            raise ConfigError(f"unknown step_period {self.step_period!r}")

        def check(node, path):
            kids = node.get("children", [])
            if len(path) > len(_DEPTH_KIND):
                raise ConfigError(f"taxonomy deeper than {len(_DEPTH_KIND)} levels at {path}")
            if kids:
                total = sum(float(c["share"]) for c in kids)
                if abs(total - 1.0) > 1e-9:
                    raise ConfigError(f"child shares of {node['id']!r} sum to {total:g}, not 1")
                for c in kids:
                    check(c, path + [c["id"]])

        for cat in self.categories:
            check(cat, [cat["id"]])
        for g in self.groups:
            fine = g.get("fine", [])
            if fine:
                total = sum(float(f.get("weight", 1.0 / len(fine))) for f in fine)
                if abs(total - 1.0) > 1e-9:
                    raise ConfigError(f"fine-group weights of {g['id']!r} sum to {total:g}, not 1")


def default_config():
    """The desk-scale configuration: 3 categories x 4 children, 2 coarse
    groups with 2 age bands each; 15 elements x 6 groups = 90 series."""
    path = Path(__file__).with_name("configs") / "desk.json"
    return SynthConfig.load(path)


def _walk(node, parent_id, depth, out):
    out.append((node, parent_id, depth))
    for c in node.get("children", []):
        _walk(c, node["id"], depth + 1, out)


def synth_generate(config, seed):
    """Generate a :class:`Dataset`; a pure function of ``(config, seed)``."""
    if isinstance(config, dict):
        config = SynthConfig.from_dict(config)
    rng = np.random.default_rng(seed)
    P = config.steps_per_year
    t = np.arange(config.steps, dtype=np.float64)
    angle = 2 * np.pi * (t % P) / P

    nodes = []
    for cat in config.categories:
        _walk(cat, None, 0, nodes)
    elements = [FashionElement(n["id"], _DEPTH_KIND[d], p) for n, p, d in nodes]

    def clean_signal(cat, path, gparams):
        # path: chain of nodes from the category down to a leaf
        amp_scale = np.prod([float(n.get("amplitude", 1.0)) for n in path[1:]])
        phase_shift = sum(float(n.get("phase", 0.0)) for n in path[1:])
        base = (float(cat["level"]) * gparams["level"] + float(cat.get("trend", 0.0)) * t
                + float(cat.get("amplitude", 0.0)) * amp_scale
                * np.sin(angle + float(cat.get("phase", 0.0)) + phase_shift + gparams["phase"]))
        return float(path[-1].get("share", 1.0)) * base

    def element_signals(gparams):
        sig = {}

        def rec(cat, path):
            node = path[-1]
            kids = node.get("children", [])
            if not kids:
                sig[node["id"]] = clean_signal(cat, path, gparams)
                return sig[node["id"]]
            total = np.zeros_like(t)
            for c in kids:
                total = total + float(c["share"]) * rec(cat, path + [c])
            sig[node["id"]] = total
            return total

        for cat in config.categories:
            rec(cat, [cat])
        return sig

    groups, clean = [], {}
    for g in config.groups:
        fine = g.get("fine", [])
        if not fine:
            groups.append(UserGroup(g["id"], g["city"], g["gender"], g.get("age_band")))
            clean[g["id"]] = element_signals({"level": float(g.get("level", 1.0)),
                                              "phase": float(g.get("phase", 0.0))})
            continue
        groups.append(UserGroup(g["id"], g["city"], g["gender"], None))
        mix = {}
        for f in fine:
            fid = f.get("id") or f"{g['id']}_{f['age_band']}"
            groups.append(UserGroup(fid, g["city"], g["gender"], f["age_band"]))
            sig = element_signals({"level": float(f.get("level", 1.0)),
                                   "phase": float(f.get("phase", 0.0))})
            clean[fid] = sig
            w = float(f.get("weight", 1.0 / len(fine)))
            for eid, v in sig.items():
                mix[eid] = mix.get(eid, 0.0) + w * v
        clean[g["id"]] = mix

    has_children = {p for _, p, _ in nodes if p is not None}
    series = []
    for grp in groups:
        for e in elements:
            sigma = config.parent_noise if e.id in has_children else config.noise
            v = clean[grp.id][e.id] + sigma * rng.standard_normal(config.steps)
            series.append(TrendSeries(grp.id, e.id, np.clip(v, 0.0, 1.0),
                                      np.ones(config.steps, dtype=bool), config.step_period))
    return Dataset(series, elements, groups, config.step_period, P)


def clean_signals(config):
    """Noiseless series keyed by (group_id, element_id), for oracles."""
    cfg = SynthConfig.from_dict({**config.to_dict(), "noise": 0.0, "parent_noise": 0.0})
    return {s.key: s.values for s in synth_generate(cfg, 0).series}
