"""Three-anchor self-localization from inter-anchor distances.

Frame convention: anchor 0 at the origin, +x through anchor 1, z up, and
anchor 2 on the -y half plane. All anchors share one height.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

DEFAULT_IDS = (100, 101, 102)
DEFAULT_HEIGHT = 1.0

# anchor 2 closer than this to the x axis counts as collinear
COLLINEAR_TOL = 1e-6
# negative discriminants above this are rounding, below it a broken triangle
DISCRIMINANT_TOL = -1e-9


class SurveyError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSurvey:
    """Pairwise distances between anchors 0, 1 and 2."""

    d01: float
    d02: float
    d12: float
    anchor_height: float = DEFAULT_HEIGHT
    ids: tuple = DEFAULT_IDS

    def __post_init__(self):
        d = (self.d01, self.d02, self.d12)
        if not all(np.isfinite(d)) or min(d) <= 0:
            raise SurveyError(f"distances must be positive and finite, got {d}")


@dataclass
class AnchorMap:
    positions: dict = field(default_factory=dict)

    def __getitem__(self, anchor_id):
        return self.positions[anchor_id]

    def __len__(self):
        return len(self.positions)

    def ids(self):
        return sorted(self.positions)

    def as_array(self):
        return np.array([self.positions[i] for i in self.ids()])


def self_localize(survey: AnchorSurvey) -> AnchorMap:
    """Closed-form anchor coordinates in the deployment frame."""
    d01, d02, d12, h = survey.d01, survey.d02, survey.d12, survey.anchor_height
    x2 = (d01**2 + d02**2 - d12**2) / (2.0 * d01)
    disc = d02**2 - x2**2
    if disc < DISCRIMINANT_TOL:
        raise SurveyError(f"distances violate the triangle inequality (d01={d01}, d02={d02}, d12={d12})")
    y2 = -np.sqrt(max(disc, 0.0))
    if -y2 <= COLLINEAR_TOL:
        raise SurveyError(f"anchors are collinear (d01={d01}, d02={d02}, d12={d12})")
    a0, a1, a2 = survey.ids
    return AnchorMap(
        {
            a0: np.array([0.0, 0.0, h]),
            a1: np.array([d01, 0.0, h]),
            a2: np.array([x2, y2, h]),
        }
    )


def distances_of(anchors: AnchorMap, ids=DEFAULT_IDS, anchor_height=None) -> AnchorSurvey:
    """Survey that a perfect ranging network would report for ``anchors``."""
    p0, p1, p2 = (np.asarray(anchors[i], dtype=float) for i in ids)
    h = float(p0[2]) if anchor_height is None else anchor_height
    return AnchorSurvey(
        float(np.linalg.norm(p1 - p0)),
        float(np.linalg.norm(p2 - p0)),
        float(np.linalg.norm(p2 - p1)),
        h,
        tuple(ids),
    )


def survey_from_network(samples, n_samples=1, ids=DEFAULT_IDS, anchor_height=DEFAULT_HEIGHT) -> AnchorSurvey:
    """Aggregate raw ``(anchor_i, anchor_j, distance, stamp)`` samples by pairwise median.

    Pairs are unordered. Every pair needs at least ``n_samples`` samples.
    """
    by_pair = defaultdict(list)
    for a, b, d, *_ in samples:
        by_pair[frozenset((int(a), int(b)))].append(float(d))
    a0, a1, a2 = ids
    out = []
    for pair in ((a0, a1), (a0, a2), (a1, a2)):
        vals = by_pair.get(frozenset(pair), [])
        if len(vals) < max(n_samples, 1):
            raise SurveyError(f"pair {pair} has {len(vals)} samples, need {max(n_samples, 1)}")
        out.append(float(np.median(vals)))
    return AnchorSurvey(*out, anchor_height=anchor_height, ids=tuple(ids))


def simulate_survey(anchors: AnchorMap, n_samples, sigma, rng, ids=DEFAULT_IDS, rate=10.0):
    """Noisy inter-anchor range samples as a ranging network would deliver them."""
    truth = distances_of(anchors, ids)
    rows = []
    for (a, b), d in zip(((ids[0], ids[1]), (ids[0], ids[2]), (ids[1], ids[2])), (truth.d01, truth.d02, truth.d12)):
        noisy = d + sigma * rng.standard_normal(n_samples)
        rows.extend((a, b, float(x), k / rate) for k, x in enumerate(noisy))
    rows.sort(key=lambda r: (r[3], r[0], r[1]))
    return rows


# field deployments of the three-anchor scheme, coordinates in metres
FIELD_DEPLOYMENTS = {
    "test_01": ((0.0, 0.0, 1.0), (61.55, 0.0, 1.0), (24.14, -14.15, 1.0)),
    "test_02": ((0.0, 0.0, 1.0), (39.53, 0.0, 1.0), (14.28, -9.92, 1.0)),
    "test_03": ((0.0, 0.0, 1.0), (44.98, 0.0, 1.0), (28.46, -9.97, 1.0)),
    "test_04": ((0.0, 0.0, 1.0), (12.16, 0.0, 1.0), (6.08, -11.64, 1.0)),
}


def field_deployment(name, ids=DEFAULT_IDS) -> AnchorMap:
    return AnchorMap({i: np.array(p, dtype=float) for i, p in zip(ids, FIELD_DEPLOYMENTS[name])})
