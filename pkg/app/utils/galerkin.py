import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse

from app.models.operators import BlockOperator, FirstOrderOperator, LeafKey
from app.utils.fourier import ModeLattice

logger = logging.getLogger(__name__)


def coupling_matrix(modes: np.ndarray, lattice_in: ModeLattice, lattice_out: ModeLattice,
                    weights) -> sparse.csr_matrix:
    """Sparse matrix sending e^{i n.y} v to sum_c e^{i (n+c).y} weights(c_index, n) v.

    ``weights(index, valid)`` returns the (N_valid, r_out, r_in) blocks for coefficient mode ``modes[index]``
    acting on the input modes selected by the boolean mask ``valid``.
    """
    r_in, r_out = lattice_in.rank, lattice_out.rank
    rows_all, cols_all, data_all = [], [], []
    in_idx = np.arange(lattice_in.size)
    for index, mode in enumerate(modes):
        out_idx = lattice_out.index(lattice_in.modes + mode)
        valid = out_idx >= 0
        if not np.any(valid):
            continue
        blocks = weights(index, valid)
        rows = out_idx[valid][:, None, None] * r_out + np.arange(r_out)[None, :, None]
        cols = in_idx[valid][:, None, None] * r_in + np.arange(r_in)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        rows_all.append(rows.ravel())
        cols_all.append(cols.ravel())
        data_all.append(np.broadcast_to(blocks, rows.shape).ravel())
    shape = (lattice_out.dimension, lattice_in.dimension)
    if not rows_all:
        return sparse.csr_matrix(shape, dtype=complex)
    matrix = sparse.coo_matrix((np.concatenate(data_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                               shape=shape)
    return matrix.tocsr()


def assemble_first_order(op: FirstOrderOperator, leaf_mode: Sequence[float], lattice_in: ModeLattice,
                         lattice_out: ModeLattice, shift: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """Galerkin matrix of ``op`` on leaf mode ``leaf_mode``, optionally Bloch shifted by ``shift`` = (xi0, eta0).

    Entry (m, n) is sum_mu C^mu_{m-n} i k_mu + Z_{m-n} with k = (a, n) + shift.
    """
    p = op.space.p
    modes, derivative, potential = op.coefficient_data
    shift = np.zeros(p + op.space.q) if shift is None else np.asarray(shift, dtype=float)
    leaf = np.asarray(leaf_mode, dtype=float) + shift[:p]

    def weights(index, valid):
        inputs = lattice_in.modes[valid]
        k = np.concatenate([np.broadcast_to(leaf, (len(inputs), p)), inputs + shift[p:]], axis=1)
        return np.einsum("mrs,nm->nrs", 1j * derivative[index], k) + potential[index][None]

    return coupling_matrix(modes, lattice_in, lattice_out, weights)


def assemble_block_diagonal(op: FirstOrderOperator, leaf_lattice: ModeLattice, lattice: ModeLattice,
                            pad: int = 0, shift: Optional[np.ndarray] = None, threads: int = 1) -> BlockOperator:
    """BlockOperator of an x-independent first-order operator; rows padded by ``pad`` shells."""
    lattice_out = lattice.padded(pad) if pad else lattice
    keys = [tuple(int(v) for v in mode) for mode in leaf_lattice.modes]

    def build(key: LeafKey):
        return key, assemble_first_order(op, key, lattice, lattice_out, shift)

    blocks: Dict[Tuple[LeafKey, LeafKey], sparse.csr_matrix] = {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build, keys))
    else:
        results = [build(key) for key in keys]
    for key, block in results:
        blocks[(key, key)] = block
    return BlockOperator(leaf_lattice, lattice, blocks, lattice_out)
