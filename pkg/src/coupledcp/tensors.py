"""Dense multiway-array kernels: unfoldings, Khatri-Rao products, MTTKRP,
Gram products and CP reconstruction.

Conventions
-----------
* Tensors are plain ``numpy`` arrays of order >= 2 with float64 entries.
* Linearization is first-index-fastest (column-major). The mode-0 unfolding
  of a tensor is therefore a plain reshape, and the mode-``d`` unfolding maps
  element ``(i_0, ..., i_{D-1})`` to row ``i_d`` and a column index in which
  the smallest remaining mode varies fastest.
* A CP model is an ordered list of factor matrices, one per mode, all sharing
  the same number of columns.
"""

import struct

import numpy as np

_AXIS_LETTERS = "abcdefghijklmnopqrstuvwxy"
_COMP_LETTER = "z"


def check_factors(factors):
    """Validate a list of CP factor matrices and return it as float64 arrays.

    All matrices must be 2-D and share the same column count.
    """
    if len(factors) < 2:
        raise ValueError("a CP model needs at least two factor matrices")
    out = [np.asarray(f, dtype=float) for f in factors]
    for f in out:
        if f.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError("factor matrices must be non-empty")
    cols = {f.shape[1] for f in out}
    if len(cols) != 1:
        raise ValueError(f"factor matrices disagree on column count: {sorted(cols)}")
    return out


def _check_mode(ndim, mode):
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for order-{ndim} tensor")


def unfold(tensor, mode):
    """Mode-``mode`` unfolding of ``tensor`` into an ``n_mode x rest`` matrix.

    Columns enumerate the remaining modes with the smallest mode varying
    fastest (first-index-fastest convention).
    """
    t = np.asarray(tensor, dtype=float)
    _check_mode(t.ndim, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def refold(matrix, mode, shape):
    """Inverse of :func:`unfold`: rebuild the tensor of ``shape`` from its
    mode-``mode`` unfolding."""
    shape = tuple(int(n) for n in shape)
    _check_mode(len(shape), mode)
    m = np.asarray(matrix, dtype=float)
    rest = tuple(n for d, n in enumerate(shape) if d != mode)
    t = np.reshape(m, (shape[mode],) + rest, order="F")
    return np.moveaxis(t, 0, mode)


def khatri_rao(a, b):
    """Column-wise Kronecker (Khatri-Rao) product of two matrices.

    Column ``j`` of the result is ``kron(a[:, j], b[:, j])``; the row index of
    ``b`` varies fastest.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("khatri_rao expects matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def co_khatri_rao(factors, skip_mode):
    """Khatri-Rao product of all factors except ``skip_mode``.

    Factors enter from the highest mode down to the lowest, so that
    ``unfold(reconstruct(factors), d) == factors[d] @ co_khatri_rao(factors, d).T``.
    """
    factors = check_factors(factors)
    _check_mode(len(factors), skip_mode)
    others = [factors[m] for m in range(len(factors)) if m != skip_mode]
    out = others[-1]
    for f in reversed(others[:-1]):
        out = khatri_rao(out, f)
    return out


def mttkrp(tensor, factors, mode):
    """Matricized-tensor times Khatri-Rao product for ``mode``.

    Equals ``unfold(tensor, mode) @ co_khatri_rao(factors, mode)`` but is
    computed as a direct contraction without materializing the Khatri-Rao
    matrix. ``factors[mode]`` is ignored (only its column count matters).
    """
    t = np.asarray(tensor, dtype=float)
    factors = check_factors(factors)
    _check_mode(t.ndim, mode)
    if t.ndim != len(factors):
        raise ValueError("tensor order and number of factors differ")
    for d in range(t.ndim):
        if d != mode and factors[d].shape[0] != t.shape[d]:
            raise ValueError(
                f"factor for mode {d} has {factors[d].shape[0]} rows, "
                f"tensor dimension is {t.shape[d]}"
            )
    if t.ndim > len(_AXIS_LETTERS):
        return mttkrp_naive(tensor, factors, mode)
    sub = _AXIS_LETTERS[: t.ndim]
    operands = [t]
    terms = [sub]
    for d in range(t.ndim):
        if d == mode:
            continue
        terms.append(sub[d] + _COMP_LETTER)
        operands.append(factors[d])
    expr = ",".join(terms) + "->" + sub[mode] + _COMP_LETTER
    return np.einsum(expr, *operands, optimize=True)


def mttkrp_naive(tensor, factors, mode):
    """Two-step MTTKRP baseline: unfold, then multiply by the explicit
    co-Khatri-Rao matrix. Kept as the oracle path."""
    return unfold(tensor, mode) @ co_khatri_rao(factors, mode)


def gram_hadamard(factors, skip_mode):
    """Hadamard product of the factor Grams ``C_d^T C_d`` over all modes
    except ``skip_mode``; equals ``M^T M`` for the co-Khatri-Rao matrix."""
    factors = check_factors(factors)
    _check_mode(len(factors), skip_mode)
    rank = factors[0].shape[1]
    out = np.ones((rank, rank))
    for d, f in enumerate(factors):
        if d != skip_mode:
            out *= f.T @ f
    return out


def reconstruct(factors, shape=None):
    """Dense tensor represented by the CP factors.

    Entry ``(j_0, ..., j_{D-1})`` is ``sum_r prod_d factors[d][j_d, r]``.
    """
    factors = check_factors(factors)
    rows = tuple(f.shape[0] for f in factors)
    if shape is not None and tuple(int(n) for n in shape) != rows:
        raise ValueError(f"factor row counts {rows} do not match shape {tuple(shape)}")
    if len(factors) > len(_AXIS_LETTERS):
        return refold(factors[0] @ co_khatri_rao(factors, 0).T, 0, rows)
    sub = _AXIS_LETTERS[: len(factors)]
    expr = ",".join(s + _COMP_LETTER for s in sub) + "->" + sub
    return np.einsum(expr, *factors, optimize=True)


# ---------------------------------------------------------------------------
# Tensor container formats.
#
# Binary: magic "DTEN1", order D (uint32 LE), D dims (uint32 LE), then
# prod(dims) float64 LE values in first-index-fastest order.
# Text: header line "dten <d1> <d2> ...", then whitespace-separated values in
# the same order.
# ---------------------------------------------------------------------------

_MAGIC = b"DTEN1"


def write_tensor(path, array, text=False):
    """Write ``array`` to ``path`` in the binary container (default) or the
    plain-text fixture variant."""
    a = np.asarray(array, dtype=float)
    if a.ndim < 2:
        raise ValueError("tensor files hold arrays of order >= 2")
    values = np.ravel(a, order="F")
    if text:
        with open(path, "w") as fh:
            fh.write("dten " + " ".join(str(n) for n in a.shape) + "\n")
            per_line = a.shape[0]
            for start in range(0, values.size, per_line):
                chunk = values[start : start + per_line]
                fh.write(" ".join(repr(float(v)) for v in chunk) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(values.astype("<f8").tobytes())


def _read_text_header(line):
    parts = line.split()
    if not parts or parts[0] != "dten":
        raise ValueError("not a tensor file: expected 'DTEN1' magic or 'dten' header")
    shape = tuple(int(p) for p in parts[1:])
    if len(shape) < 2 or any(n < 1 for n in shape):
        raise ValueError(f"bad tensor header dimensions {shape}")
    return shape


def read_tensor_header(path):
    """Shape stored in a tensor file, read without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head == _MAGIC:
            (ndim,) = struct.unpack("<I", fh.read(4))
            if not 2 <= ndim <= 255:
                raise ValueError(f"bad tensor order {ndim} in {path}")
            return struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    with open(path, "r") as fh:
        return _read_text_header(fh.readline())


def read_tensor(path):
    """Read a tensor from the binary container or its text variant."""
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head == _MAGIC:
            (ndim,) = struct.unpack("<I", fh.read(4))
            if not 2 <= ndim <= 255:
                raise ValueError(f"bad tensor order {ndim} in {path}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            values = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if values.size != count:
                raise ValueError(f"truncated tensor payload in {path}")
            return np.reshape(values.astype(float), shape, order="F")
    with open(path, "r") as fh:
        shape = _read_text_header(fh.readline())
        values = np.array(fh.read().split(), dtype=float)
    count = int(np.prod(shape))
    if values.size != count:
        raise ValueError(
            f"tensor file {path} holds {values.size} values, header implies {count}"
        )
    return np.reshape(values, shape, order="F")
