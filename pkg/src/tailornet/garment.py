"""Garments as body submeshes: extraction, draping, un-posing, collision fix.

A garment is defined by the body vertices it rides on plus its own face
list.  Draping gathers the un-posed body positions, adds a displacement
field and skins the result with the body's blend weights; un-posing
inverts the skinning and subtracts the body, recovering the displacement
field from a simulated garment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import body as body_mod
from .containers import read_container, write_container
from .meshdist import MeshDistance


class GarmentError(ValueError):
    """Bad garment selection (empty or disconnected)."""


@dataclass(frozen=True)
class GarmentSpec:
    """Submesh of the body: vertex association map plus garment faces."""

    body_vertex_map: np.ndarray  # (m,) body vertex index per garment vertex
    faces: np.ndarray  # (F, 3) indices into garment vertices
    name: str

    @property
    def n_vertices(self):
        return self.body_vertex_map.shape[0]

    def validate(self, model=None):
        vmap = self.body_vertex_map
        if vmap.size == 0:
            raise GarmentError("empty garment")
        if np.unique(vmap).size != vmap.size:
            raise GarmentError("duplicate body vertex in garment map")
        if vmap.min() < 0:
            raise GarmentError("negative body vertex index")
        if model is not None and vmap.max() >= model.n_vertices:
            raise GarmentError("garment maps past the body vertex count")
        if self.faces.size and (
            self.faces.min() < 0 or self.faces.max() >= self.n_vertices
        ):
            raise GarmentError("garment face index out of range")
        if not _is_edge_connected(self.n_vertices, self.faces):
            raise GarmentError(f"garment {self.name!r} is not edge-connected")
        return self

    def to_chunks(self):
        return {
            "vmap": self.body_vertex_map,
            "faces": self.faces,
            "name": np.frombuffer(self.name.encode("utf-8"), dtype=np.uint8),
        }

    @classmethod
    def from_chunks(cls, chunks):
        return cls(
            body_vertex_map=np.asarray(chunks["vmap"], dtype=np.int64).ravel(),
            faces=np.asarray(chunks["faces"], dtype=np.int64).reshape(-1, 3),
            name=bytes(
                np.asarray(chunks["name"], dtype=np.int32).astype(np.uint8)
            ).decode("utf-8"),
        ).validate()

    def save(self, path):
        write_container(path, self.to_chunks())

    @classmethod
    def load(cls, path):
        return cls.from_chunks(read_container(path))


@dataclass(frozen=True)
class DisplacementField:
    """Per-garment-vertex offsets (meters) in the un-posed space."""

    offsets: np.ndarray  # (m, 3)

    def validate(self, spec=None):
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("non-finite displacement field")
        if spec is not None and self.offsets.shape != (spec.n_vertices, 3):
            raise ValueError(
                f"displacement shape {self.offsets.shape} does not match garment"
            )
        return self

    def flat(self):
        return self.offsets.reshape(-1)

    @classmethod
    def from_flat(cls, values):
        return cls(np.asarray(values, dtype=np.float64).reshape(-1, 3))


def _is_edge_connected(n_vertices, faces):
    if faces.size == 0:
        return False  # no faces means no edges, so nothing to hang together
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [0, 2]]])
    adj = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
        shape=(n_vertices, n_vertices),
    )
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def extract_garment(model, selector, name):
    """Carve a garment out of the body.

    `selector` is either an index array or a predicate over (index,
    position) arrays returning a boolean mask.  Faces survive when all
    three corners are selected; the result must be one edge-connected
    piece.
    """
    if callable(selector):
        mask = np.asarray(
            selector(np.arange(model.n_vertices), model.template_vertices),
            dtype=bool,
        )
        selected = np.nonzero(mask)[0]
    else:
        selected = np.unique(np.asarray(selector, dtype=np.int64))
    if selected.size == 0:
        raise GarmentError("selector picked no vertices")

    lookup = np.full(model.n_vertices, -1, dtype=np.int64)
    lookup[selected] = np.arange(selected.size)
    fmask = np.all(lookup[model.faces] >= 0, axis=1)
    faces = lookup[model.faces[fmask]]
    spec = GarmentSpec(body_vertex_map=selected, faces=faces, name=name)
    return spec.validate(model)


def drape_unposed(model, params, spec, d):
    """Garment in the un-posed space: gathered body vertices plus offsets."""
    d.validate(spec)
    unposed_body = body_mod.unposed_shape(model, params)
    return unposed_body[spec.body_vertex_map] + d.offsets


def garment_weights(model, spec):
    return model.skinning_weights[spec.body_vertex_map]


def drape(model, params, spec, d):
    """Posed garment: un-posed drape followed by the body's skinning."""
    unposed = drape_unposed(model, params, spec, d)
    return body_mod.skin(model, params, unposed, weights=garment_weights(model, spec))


def unpose(model, params, spec, simulated):
    """Recover the displacement field that reproduces a simulated garment."""
    simulated = np.asarray(simulated, dtype=np.float64)
    unposed = body_mod.unskin(
        model, params, simulated, weights=garment_weights(model, spec)
    )
    unposed_body = body_mod.unposed_shape(model, params)
    return DisplacementField(unposed - unposed_body[spec.body_vertex_map])


def resolve_penetration(model, params, spec, garment, eps=0.002, dist=None):
    """Push garment vertices to at least `eps` outside the posed body.

    Vertices already clear of the body are untouched; offenders are moved
    along the body normal at their nearest surface point.  Returns
    (vertices, moved_count).  Pass a prebuilt MeshDistance via `dist` to
    amortize across calls for one pose.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if dist is None:
        posed_body = body_mod.skin(
            model, params, body_mod.unposed_shape(model, params)
        )
        dist = MeshDistance(posed_body, model.faces)
    return dist.project_outside(np.asarray(garment, dtype=np.float64), eps)


# ---------------------------------------------------------------------------
# named garment cuts for the procedural body
# ---------------------------------------------------------------------------

def tshirt_selector(_, positions):
    """Sleeveless top: torso band from below the chest up to the shoulders."""
    y = positions[:, 1]
    radial = np.linalg.norm(positions[:, [0, 2]], axis=1)
    return (y >= 1.04) & (y <= 1.47) & (radial <= 0.26)


def waistband_selector(_, positions):
    """Hip band around the lower torso."""
    y = positions[:, 1]
    radial = np.linalg.norm(positions[:, [0, 2]], axis=1)
    return (y >= 0.78) & (y <= 1.02) & (radial <= 0.26)


GARMENT_SELECTORS = {
    "tshirt": tshirt_selector,
    "waistband": waistband_selector,
}


def make_garment(model, name):
    try:
        selector = GARMENT_SELECTORS[name]
    except KeyError:
        raise GarmentError(
            f"unknown garment {name!r}; choose from {sorted(GARMENT_SELECTORS)}"
        ) from None
    return extract_garment(model, selector, name)
