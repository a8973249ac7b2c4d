"""Pointer decoding and recomposition of final interaction triplets.

Each interaction representation points at two instance slots: the argmax,
over instance representations, of the cosine similarity of its human-side
and object-side vectors. Recomposition then just gathers the pointed-at
boxes, so the whole decode costs O(K*N*d) with no pairwise box matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .geometry import Box


@dataclass(frozen=True)
class HOPointers:
    h_idx: tuple[int, ...]
    o_idx: tuple[int, ...]


@dataclass(frozen=True)
class PointerProbabilities:
    p_h: np.ndarray  # (K, N), rows sum to 1
    p_o: np.ndarray


@dataclass(frozen=True)
class HOITriplet:
    """One predicted interaction: boxes, action scores and the source slots."""

    human_box: Box
    object_box: Box
    action_scores: np.ndarray  # (gamma - 1,) probabilities for actions 1..
    interactiveness: float
    source: tuple[int, int]


def _normalized_rows(x: np.ndarray, side: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1))
    bad = np.where(norms == 0.0)[0]
    if bad.size:
        raise DegenerateInputError(f"zero-norm row {int(bad[0])} in {side}")
    return x / norms[:, None]


def similarity_matrix(v: np.ndarray, mu: np.ndarray, side: str = "v") -> np.ndarray:
    """(K, N) cosine similarities between pointer vectors and instances."""
    return _normalized_rows(np.asarray(v, dtype=np.float64), side) @ \
        _normalized_rows(np.asarray(mu, dtype=np.float64), "mu").T


def decode_pointers(v_h: np.ndarray, v_o: np.ndarray,
                    mu: np.ndarray) -> HOPointers:
    """Argmax-of-similarity slot indices; exact ties pick the lowest index."""
    sim_h = similarity_matrix(v_h, mu, "v_h")
    sim_o = similarity_matrix(v_o, mu, "v_o")
    return HOPointers(tuple(int(i) for i in sim_h.argmax(axis=1)),
                      tuple(int(i) for i in sim_o.argmax(axis=1)))


def pointer_probabilities(v_h: np.ndarray, v_o: np.ndarray, mu: np.ndarray,
                          tau_p: float = 0.1) -> PointerProbabilities:
    """Row softmax over instances of similarities scaled by 1/tau_p."""
    if tau_p <= 0.0:
        raise ValueError(f"tau_p must be positive, got {tau_p}")

    def rows(sim):
        z = sim / tau_p
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    return PointerProbabilities(rows(similarity_matrix(v_h, mu, "v_h")),
                                rows(similarity_matrix(v_o, mu, "v_o")))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def recompose(boxes: np.ndarray, act_logits: np.ndarray,
              pointers: HOPointers) -> list[HOITriplet]:
    """Assemble K triplets by following the pointers into the instance boxes.

    ``boxes`` are the decoded instance boxes (N, 4); ``act_logits`` the
    interaction action logits (K, gamma) whose slot 0 is interactiveness.
    Runs in O(K) once the pointers exist; never builds a K x N pair table.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    probs = _sigmoid(np.asarray(act_logits, dtype=np.float64))
    out = []
    for i, (h, o) in enumerate(zip(pointers.h_idx, pointers.o_idx)):
        out.append(HOITriplet(
            human_box=Box(*boxes[h]),
            object_box=Box(*boxes[o]),
            action_scores=probs[i, 1:].copy(),
            interactiveness=float(probs[i, 0]),
            source=(int(h), int(o)),
        ))
    return out


def recompose_direct(hbox_logits: np.ndarray, obox_logits: np.ndarray,
                     act_logits: np.ndarray) -> list[HOITriplet]:
    """Triplets for the direct-regression ablation (no pointers)."""
    hboxes = _sigmoid(np.asarray(hbox_logits, dtype=np.float64))
    oboxes = _sigmoid(np.asarray(obox_logits, dtype=np.float64))
    probs = _sigmoid(np.asarray(act_logits, dtype=np.float64))
    return [HOITriplet(Box(*hboxes[i]), Box(*oboxes[i]),
                       probs[i, 1:].copy(), float(probs[i, 0]), (-1, -1))
            for i in range(act_logits.shape[0])]
