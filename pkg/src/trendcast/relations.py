"""Affiliation graphs and relation message passing over embeddings.

Element relations run child -> parent along the taxonomy with weights
``alpha`` (each parent's row sums to 1). Group relations run fine group ->
coarse group with fixed weight 1. A single synchronous pass is made: the
source side always uses the original (pre-message) embeddings.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, VocabularyError

log = logging.getLogger(__name__)

NO_AGE = "none"


@dataclass
class Vocab:
    """Index maps for every embedding table plus the graph node orders."""
    cities: list
    ages: list
    genders: list
    elements: list
    groups: list
    group_attrs: list

    @classmethod
    def from_dataset(cls, dataset):
        cities = sorted({g.city for g in dataset.groups})
        ages = [NO_AGE] + sorted({g.age_band for g in dataset.groups if g.age_band})
        genders = sorted({g.gender for g in dataset.groups})
        return cls(cities, ages, genders, [e.id for e in dataset.elements],
                   [g.id for g in dataset.groups],
                   [[g.city, g.age_band or NO_AGE, g.gender] for g in dataset.groups])

    @classmethod
    def from_dict(cls, d):
        return cls(d["cities"], d["ages"], d["genders"], d["elements"], d["groups"],
                   d["group_attrs"])

    def to_dict(self):
        return {"cities": self.cities, "ages": self.ages, "genders": self.genders,
                "elements": self.elements, "groups": self.groups,
                "group_attrs": self.group_attrs}

    def group_index(self, gid):
        try:
            return self.groups.index(gid)
        except ValueError:
            raise VocabularyError(f"unknown group {gid!r}") from None

    def element_index(self, eid):
        try:
            return self.elements.index(eid)
        except ValueError:
            raise VocabularyError(f"unknown element {eid!r}") from None

    def attribute_indices(self, attrs=None):
        """Rows into the city/age/gender tables for each group (or ``attrs``)."""
        rows = self.group_attrs if attrs is None else attrs
        out = np.empty((len(rows), 3), dtype=np.intp)
        for k, (c, a, n) in enumerate(rows):
            for j, (value, table, name) in enumerate(
                    ((c, self.cities, "city"), (a or NO_AGE, self.ages, "age band"),
                     (n, self.genders, "gender"))):
                try:
                    out[k, j] = table.index(value)
                except ValueError:
                    raise VocabularyError(f"unknown {name} {value!r}") from None
        return out


# --------------------------------------------------------------------- graphs

def build_alpha(elements, series_values, override=None):
    """Child-share weights ``{(parent, child): w}`` from mean training popularity.

    ``series_values`` maps element id to an iterable of value arrays (one per
    group, training region only). Children whose siblings carry no mass get a
    uniform share. ``override`` (``{parent: {child: w}}``) replaces rows.
    """
    children = {}
    for e in elements:
        if e.parent_id is not None:
            children.setdefault(e.parent_id, []).append(e.id)
    alpha = {}
    for parent, kids in children.items():
        if override and parent in override:
            row = {c: float(override[parent].get(c, 0.0)) for c in kids}
        else:
            row = {}
            for c in kids:
                arrays = [np.asarray(v, dtype=np.float64) for v in series_values.get(c, [])]
                row[c] = float(np.concatenate(arrays).mean()) if arrays else 0.0
        total = sum(row.values())
        if total <= 0:
            row = {c: 1.0 / len(kids) for c in kids}
        else:
            row = {c: w / total for c, w in row.items()}
        for c, w in row.items():
            alpha[(parent, c)] = w
    return alpha


def load_alpha_override(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"{path}: alpha override must map parent ids to {{child: weight}}")
    return data


def alpha_matrix(vocab, alpha):
    """Dense (E, E) weights with ``A[parent, child] = alpha``."""
    A = np.zeros((len(vocab.elements), len(vocab.elements)))
    for (p, c), w in alpha.items():
        A[vocab.element_index(p), vocab.element_index(c)] = w
    return A


def group_matrix(vocab):
    """Dense (G, G) weights: 1 from each fine group to its coarse group."""
    n = len(vocab.groups)
    Bm = np.zeros((n, n))
    for i, (ci, ai, gi) in enumerate(vocab.group_attrs):
        if ai not in (None, NO_AGE):
            continue
        for j, (cj, aj, gj) in enumerate(vocab.group_attrs):
            if aj not in (None, NO_AGE) and cj == ci and gj == gi:
                Bm[i, j] = 1.0
    return Bm


# ------------------------------------------------------------- message passing

def embed_groups(city_emb, age_emb, gender_emb, attr_idx, W, b):
    """Fuse city/age/gender embeddings of every group: (G, D)."""
    parts = [ad.take(city_emb, attr_idx[:, 0]), ad.take(age_emb, attr_idx[:, 1]),
             ad.take(gender_emb, attr_idx[:, 2])]
    return ad.linear(ad.concat(parts, axis=-1), W, b)


def embed_group(group, vocab, city_emb, age_emb, gender_emb, W, b):
    """Fused embedding of a single :class:`UserGroup`: (D,)."""
    idx = vocab.attribute_indices([[group.city, group.age_band, group.gender]])
    return embed_groups(city_emb, age_emb, gender_emb, idx, W, b)[0]


def _message_pass(X, weights, W, b, enabled=True):
    X = ad.as_tensor(X)
    if enabled:
        msg = ad.matmul(weights, X)
    else:
        msg = ad.Tensor(np.zeros(X.shape))
    return ad.linear(ad.concat([X, msg], axis=-1), W, b)


def element_message_pass(F, A, W_e, b_e, enabled=True):
    """``f*_i = W_e [f_i, sum_j A[i, j] f_j] + b_e`` for every element.

    ``enabled=False`` substitutes a zero message (the no-relations ablation).
    """
    return _message_pass(F, A, W_e, b_e, enabled)


def group_message_pass(G, Bm, W_g, b_g, enabled=True):
    """``g*_i = W_g [g_i, sum_j Bm[i, j] g_j] + b_g`` for every group."""
    return _message_pass(G, Bm, W_g, b_g, enabled)
