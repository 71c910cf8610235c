"""Asymmetric geospatial joining: for each location of dataset A, find the
nearest dataset-B location within a great-circle radius and attach its
species vector.

The index is a ball tree over unit-sphere embeddings of (lat, lon). Chord
distance on the unit sphere is monotone in great-circle distance, so nearest
and radius queries agree exactly with the haversine metric; reported
distances are recomputed with the haversine formula for the chosen pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Dataset

EARTH_RADIUS_KM = 6371.0

_LEAF_SIZE = 32


def haversine_km(p: tuple[float, float], q: tuple[float, float]) -> float:
    """Great-circle distance in kilometers between (lat, lon) points in degrees."""
    lat1, lon1 = np.radians(p[0]), np.radians(p[1])
    lat2, lon2 = np.radians(q[0]), np.radians(q[1])
    s = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(s, 1.0))))


def _unit_sphere(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    lat = np.radians(np.asarray(lats, dtype=float))
    lon = np.radians(np.asarray(lons, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=1)


def _km_to_chord(km: float) -> float:
    return 2.0 * np.sin(min(km / (2.0 * EARTH_RADIUS_KM), np.pi / 2.0))


@dataclass
class _Node:
    center: np.ndarray
    radius: float
    left: "_Node | None" = None
    right: "_Node | None" = None
    start: int = 0
    stop: int = 0  # leaf point range in the permuted order


class BallTreeIndex:
    """Ball tree over geographic points; answers queries under the haversine
    metric identically to a linear scan."""

    def __init__(self, lats: np.ndarray, lons: np.ndarray, leaf_size: int = _LEAF_SIZE):
        lats = np.atleast_1d(np.asarray(lats, dtype=float))
        lons = np.atleast_1d(np.asarray(lons, dtype=float))
        if lats.size == 0:
            raise ValueError("BallTreeIndex needs at least one point")
        self.lats = lats
        self.lons = lons
        self.points = _unit_sphere(lats, lons)
        self.leaf_size = leaf_size
        self.order = np.arange(lats.size)
        self.root = self._build(0, lats.size)

    def _build(self, start: int, stop: int) -> _Node:
        idx = self.order[start:stop]
        pts = self.points[idx]
        center = pts.mean(axis=0)
        norm = np.linalg.norm(center)
        if norm > 0:
            center = center / norm
        radius = float(np.linalg.norm(pts - center, axis=1).max())
        node = _Node(center=center, radius=radius, start=start, stop=stop)
        if stop - start <= self.leaf_size:
            return node
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        mid = (stop - start) // 2
        # Sort by the widest dimension, index as tiebreaker, for determinism.
        local = np.lexsort((idx, pts[:, dim]))
        self.order[start:stop] = idx[local]
        node.left = self._build(start, start + mid)
        node.right = self._build(start + mid, stop)
        return node

    def nearest_within(self, lat: float, lon: float, radius_km: float) -> tuple[int, float] | None:
        """Index and haversine km of the closest point within `radius_km`
        (closed ball). Ties break toward the smaller point index."""
        q = _unit_sphere(np.array([lat]), np.array([lon]))[0]
        # Tiny inflation so boundary points survive chord/haversine rounding;
        # the exact haversine check below makes the final call.
        best_chord = _km_to_chord(radius_km) * (1.0 + 1e-12)
        best_idx: int | None = None

        stack = [self.root]
        while stack:
            node = stack.pop()
            gap = float(np.linalg.norm(q - node.center)) - node.radius
            if gap > best_chord:
                continue
            if node.left is None:
                idx = self.order[node.start : node.stop]
                d = np.linalg.norm(self.points[idx] - q, axis=1)
                for k in range(len(idx)):
                    di, ii = float(d[k]), int(idx[k])
                    if di < best_chord or (di == best_chord and (best_idx is None or ii < best_idx)):
                        best_chord, best_idx = di, ii
                continue
            stack.append(node.right)
            stack.append(node.left)
        if best_idx is None:
            return None
        km = haversine_km((lat, lon), (float(self.lats[best_idx]), float(self.lons[best_idx])))
        if km > radius_km:
            return None
        return best_idx, km

    def query_radius(self, lat: float, lon: float, radius_km: float) -> list[int]:
        """All point indices within `radius_km` (closed ball), ascending."""
        q = _unit_sphere(np.array([lat]), np.array([lon]))[0]
        chord = _km_to_chord(radius_km) * (1.0 + 1e-12)
        hits: list[int] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if float(np.linalg.norm(q - node.center)) - node.radius > chord:
                continue
            if node.left is None:
                idx = self.order[node.start : node.stop]
                d = np.linalg.norm(self.points[idx] - q, axis=1)
                hits.extend(int(i) for i in idx[d <= chord])
                continue
            stack.append(node.right)
            stack.append(node.left)
        return sorted(
            i for i in hits
            if haversine_km((lat, lon), (float(self.lats[i]), float(self.lons[i]))) <= radius_km
        )


def build_index(lats: np.ndarray, lons: np.ndarray, leaf_size: int = _LEAF_SIZE) -> BallTreeIndex:
    return BallTreeIndex(lats, lons, leaf_size=leaf_size)


@dataclass(frozen=True)
class CoLocation:
    a_id: str
    b_id: str
    distance_km: float


def colocate(a: Dataset, b: Dataset, radius_km: float = 1.0) -> list[CoLocation]:
    """Match each A location to its nearest B location within `radius_km`.

    At most one pair per A location; a B location may serve several A
    locations. The procedure is asymmetric: swapping the datasets can give a
    different pairing. Distance ties break toward the earlier B record.
    """
    if a.n_records == 0 or b.n_records == 0:
        raise ValueError("both datasets must be nonempty")
    index = build_index(b.lats, b.lons)
    pairs: list[CoLocation] = []
    for i in range(a.n_records):
        hit = index.nearest_within(float(a.lats[i]), float(a.lons[i]), radius_km)
        if hit is not None:
            j, km = hit
            pairs.append(CoLocation(a_id=a.ids[i], b_id=b.ids[j], distance_km=km))
    return pairs


def colocate_bruteforce(a: Dataset, b: Dataset, radius_km: float = 1.0) -> list[CoLocation]:
    """O(|A| x |B|) reference join; used as the oracle in tests and audits."""
    pairs: list[CoLocation] = []
    for i in range(a.n_records):
        best = None
        for j in range(b.n_records):
            d = haversine_km((float(a.lats[i]), float(a.lons[i])), (float(b.lats[j]), float(b.lons[j])))
            if d <= radius_km and (best is None or d < best[0]):
                best = (d, j)
        if best is not None:
            pairs.append(CoLocation(a_id=a.ids[i], b_id=b.ids[best[1]], distance_km=best[0]))
    return pairs


def attach(a: Dataset, b: Dataset, pairs: list[CoLocation], a_label: str = "a", b_label: str = "b") -> Dataset:
    """Combine rosters and graft paired B species data onto A's records.

    Unpaired A records keep all-false availability on the B side. Validation
    and test tags survive only on paired records; unpaired val/test records
    are dropped so evaluation sees complete information.
    """
    overlap = set(a.ids) & set(b.ids)
    if overlap:
        raise ValueError(f"record id collision across datasets: {sorted(overlap)[:5]}")

    b_row = {rid: k for k, rid in enumerate(b.ids)}
    pair_for_a = {p.a_id: p for p in pairs}

    species = list(a.species) + list(b.species)
    n, ca, cb = a.n_records, a.n_species, b.n_species
    targets = np.zeros((n, ca + cb))
    available = np.zeros((n, ca + cb), dtype=bool)
    targets[:, :ca] = a.targets
    available[:, :ca] = a.available
    for i, rid in enumerate(a.ids):
        p = pair_for_a.get(rid)
        if p is None:
            continue
        j = b_row[p.b_id]
        targets[i, ca:] = b.targets[j]
        available[i, ca:] = b.available[j]

    masks: dict[str, np.ndarray] = {}
    for name, m in a.group_masks.items():
        masks[name] = np.concatenate([m, np.zeros(cb, dtype=bool)])
    for name, m in b.group_masks.items():
        key = name if name not in masks else f"{b_label}_{name}"
        masks[key] = np.concatenate([np.zeros(ca, dtype=bool), m])
    masks[a_label] = np.concatenate([np.ones(ca, dtype=bool), np.zeros(cb, dtype=bool)])
    masks[b_label] = np.concatenate([np.zeros(ca, dtype=bool), np.ones(cb, dtype=bool)])

    combined = Dataset(
        species=species,
        ids=list(a.ids),
        lats=a.lats.copy(),
        lons=a.lons.copy(),
        env=a.env.copy(),
        targets=targets,
        available=available,
        group_masks=masks,
        split=None if a.split is None else a.split.copy(),
    )
    if combined.split is not None:
        paired = np.array([rid in pair_for_a for rid in combined.ids])
        keep = paired | (combined.split == "train")
        dropped = int((~keep).sum())
        if dropped:
            combined = combined.subset(np.flatnonzero(keep))
    return combined


def pairs_to_csv(pairs: list[CoLocation], path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a_id", "b_id", "distance_km"])
        for p in pairs:
            writer.writerow([p.a_id, p.b_id, f"{p.distance_km:.9f}"])
