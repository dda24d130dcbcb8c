"""Condition encoding: (cell type, perturbation, dosage) -> fixed-width vector.

Lookup tables replace any external prior on perturbation structure; dosage
enters linearly through one learned direction. Table id 0 of the perturbation
vocabulary is reserved for controls.
"""

from dataclasses import dataclass

import numpy as np

from .errors import VocabularyError

CONTROL_ID = 0
EMBED_WIDTH = 64
_HALF = EMBED_WIDTH // 2
_INIT_SCALE = 0.02


@dataclass(frozen=True)
class ConditionKey:
    """One experimental condition; dosage is 0 for genetic perturbations."""

    cell_type_id: int
    perturbation_id: int
    dosage: float = 0.0

    def is_control(self):
        return self.perturbation_id == CONTROL_ID


class Vocabulary:
    """Name <-> id assignment for cell types and perturbations.

    Perturbation id 0 is always "control". The on-disk format is one
    `kind,id,name` line per entry and must round-trip exactly.
    """

    def __init__(self, cell_types=None, perturbations=None):
        self.cell_types = list(cell_types) if cell_types else []
        self.perturbations = list(perturbations) if perturbations else ["control"]
        if self.perturbations[0] != "control":
            raise VocabularyError("perturbation id 0 is reserved for 'control'")

    def cell_type_id(self, name, create=False):
        try:
            return self.cell_types.index(name)
        except ValueError:
            if create:
                self.cell_types.append(name)
                return len(self.cell_types) - 1
            raise VocabularyError(f"unknown cell type {name!r}") from None

    def perturbation_id(self, name, create=False):
        try:
            return self.perturbations.index(name)
        except ValueError:
            if create:
                self.perturbations.append(name)
                return len(self.perturbations) - 1
            raise VocabularyError(f"unknown perturbation {name!r}") from None

    @property
    def n_cell_types(self):
        return len(self.cell_types)

    @property
    def n_perturbations(self):
        return len(self.perturbations)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, name in enumerate(self.cell_types):
                fh.write(f"cell_type,{i},{name}\n")
            for i, name in enumerate(self.perturbations):
                fh.write(f"perturbation,{i},{name}\n")

    @classmethod
    def load(cls, path):
        cell_types, perturbations = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(",", 2)
                if len(parts) != 3:
                    raise VocabularyError(f"bad vocabulary line {lineno}: {line!r}")
                kind, idx, name = parts
                target = {"cell_type": cell_types,
                          "perturbation": perturbations}.get(kind)
                if target is None:
                    raise VocabularyError(f"bad vocabulary kind {kind!r} at line {lineno}")
                if int(idx) != len(target):
                    raise VocabularyError(f"out-of-order id at line {lineno}")
                target.append(name)
        return cls(cell_types, perturbations)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary)
                and self.cell_types == other.cell_types
                and self.perturbations == other.perturbations)


class ConditionEmbedder:
    """Learned tables producing the 64-wide condition vector.

    embed = concat(cell_type_row, perturbation_row) + dosage * dosage_direction
    """

    def __init__(self, params, prefix, n_cell_types, n_perturbations, rng):
        self.params = params
        self.n_cell_types = n_cell_types
        self.n_perturbations = n_perturbations
        self._ct_name = f"{prefix}cell_type_table"
        self._pert_name = f"{prefix}perturbation_table"
        self._dos_name = f"{prefix}dosage_direction"
        params.register(self._ct_name,
                        rng.normal(0.0, _INIT_SCALE, (n_cell_types, _HALF)))
        params.register(self._pert_name,
                        rng.normal(0.0, _INIT_SCALE, (n_perturbations, _HALF)))
        params.register(self._dos_name,
                        rng.normal(0.0, _INIT_SCALE, EMBED_WIDTH))

    def _check_ids(self, ct_ids, pert_ids):
        if ct_ids.min(initial=0) < 0 or ct_ids.max(initial=-1) >= self.n_cell_types:
            raise VocabularyError(
                f"cell type id out of range [0, {self.n_cell_types})")
        if pert_ids.min(initial=0) < 0 or pert_ids.max(initial=-1) >= self.n_perturbations:
            raise VocabularyError(
                f"perturbation id out of range [0, {self.n_perturbations})")

    def embed(self, ct_ids, pert_ids, dosages):
        """Batch lookup; all three arguments are aligned length-B arrays."""
        ct_ids = np.asarray(ct_ids, dtype=np.intp)
        pert_ids = np.asarray(pert_ids, dtype=np.intp)
        dosages = np.asarray(dosages, dtype=np.float64)
        self._check_ids(ct_ids, pert_ids)
        vals = self.params.values
        out = np.concatenate(
            [vals[self._ct_name][ct_ids], vals[self._pert_name][pert_ids]], axis=1)
        out += dosages[:, None] * vals[self._dos_name][None, :]
        return out

    def embed_key(self, key):
        return self.embed(np.array([key.cell_type_id]),
                          np.array([key.perturbation_id]),
                          np.array([key.dosage]))[0]

    def backward(self, ct_ids, pert_ids, dosages, grad):
        """Accumulate dL/dtables for a batch whose embed() produced `grad`."""
        grads = self.params.grads
        np.add.at(grads[self._ct_name], np.asarray(ct_ids, dtype=np.intp),
                  grad[:, :_HALF])
        np.add.at(grads[self._pert_name], np.asarray(pert_ids, dtype=np.intp),
                  grad[:, _HALF:])
        grads[self._dos_name] += (np.asarray(dosages, dtype=np.float64)[:, None]
                                  * grad).sum(axis=0)
