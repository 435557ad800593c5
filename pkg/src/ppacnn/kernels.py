"""SIMD routines for in-pixel CNN inference, built from PEArray instructions.

Register usage (fixed so routines compose without clobbering each other):

=========  ==========================================================
R0         network input / activations
R1         convolution accumulator
R2, R4     shifted copies of the input during convolution; R2 also
           holds |product| for digital summation
R3         ternary fully connected weights
R5, R6     scratch (comparisons, thresholds, constants)
D0, D1     binary filter planes of conv layers 1 and 2
D2, D3     broadcast filter tap and scratch
D4-D7      digitized bit planes
D8         negative-weight mask
D9         plane being counted
D10-D12    scratch for digitize / shrink / stack counting
=========  ==========================================================
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .array import PEArray

ACT, CONV_OUT, ROW_COPY, FC_W, TAP_COPY, SCRATCH, CONST = "R0", "R1", "R2", "R3", "R4", "R5", "R6"
TAP, TMP = "D2", "D3"
DIGIT_BITS = ("D4", "D5", "D6", "D7")
NEG_MASK, COUNT = "D8", "D9"
S1, S2, S3 = "D10", "D11", "D12"

N_NEURONS = 10


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BlockGrid:
    """Partition of the array into equal rectangular computation blocks."""

    block_w: int
    block_h: int
    blocks_x: int
    blocks_y: int

    @classmethod
    def square(cls, block: int, width: int = 256, height: int = 256) -> "BlockGrid":
        if width % block or height % block:
            raise LayoutError(f"block size {block} does not tile a {width}x{height} array")
        return cls(block, block, width // block, height // block)

    @property
    def width(self):
        return self.block_w * self.blocks_x

    @property
    def height(self):
        return self.block_h * self.blocks_y

    @property
    def n_blocks(self):
        return self.blocks_x * self.blocks_y

    def check(self, pe: PEArray):
        if (self.width, self.height) != (pe.width, pe.height):
            raise LayoutError(f"grid covers {self.width}x{self.height}, array is {pe.width}x{pe.height}")

    def block_origin(self, b: int) -> tuple[int, int]:
        """(x, y) of block ``b`` in raster order."""
        return (b % self.blocks_x) * self.block_w, (b // self.blocks_x) * self.block_h


def coords(height: int, width: int):
    return np.mgrid[0:height, 0:width]


def mod_pattern(shape, k: int, row: int | None = None, col: int | None = None) -> np.ndarray:
    """Address pattern selecting PEs with ``y % k == row`` and ``x % k == col``."""
    y, x = coords(*shape)
    m = np.ones(shape, bool)
    if row is not None:
        m &= (y % k) == row
    if col is not None:
        m &= (x % k) == col
    return m


def rect_pattern(shape, x0=0, y0=0, x1=None, y1=None) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


# -- duplication -------------------------------------------------------------------

def _tile(pe: PEArray, reg: str, tmp: str, n: int, size: int, direction: str, bits=False):
    """Copy the leading unit of ``reg`` ``n`` times along ``direction`` by doubling.

    Everything outside the leading unit must be zero beforehand.
    """
    shift = pe.shift_bits if bits else pe.shift
    covered = 1
    while covered < n:
        step = min(covered, n - covered)
        shift(tmp, direction, covered * size, src=reg)
        if step < covered:
            # only the first `step` units may be copied this pass
            lim = (covered + step) * size
            y, x = coords(*pe.shape)
            along = {"E": x, "W": pe.width - 1 - x, "S": y, "N": pe.height - 1 - y}[direction]
            pe.set_flag("pattern", mask=along >= lim)
            if bits:
                pe.bit_write(tmp, False)
            else:
                pe.write(tmp, 0.0)
            pe.set_flag("all")
        if bits:
            pe.bit_or(reg, reg, tmp)
        else:
            pe.add(reg, reg, tmp)
        covered += step


def duplicate_input(pe: PEArray, reg: str, grid: BlockGrid, label="duplication"):
    """Replicate the image held in block (0, 0) into every block."""
    grid.check(pe)
    with pe.component(label):
        _tile(pe, reg, SCRATCH, grid.blocks_x, grid.block_w, "E")
        _tile(pe, reg, SCRATCH, grid.blocks_y, grid.block_h, "S")


# -- convolution -------------------------------------------------------------------

def embed_conv_weights(filters, grid: BlockGrid, k: int) -> np.ndarray:
    """Checkerboard layout: each block tiles its k x k filter bits.

    PE (x, y) of block ``b`` stores ``filters[b][y % k][x % k]``; blocks
    past the end of ``filters`` store 0.
    """
    filters = np.asarray(filters)
    if grid.block_w % k or grid.block_h % k:
        raise LayoutError(f"filter size {k} does not divide block {grid.block_w}x{grid.block_h}")
    if filters.ndim != 3 or filters.shape[1:] != (k, k):
        raise LayoutError(f"filters must have shape (n, {k}, {k}), got {filters.shape}")
    if len(filters) > grid.n_blocks:
        raise LayoutError(f"{len(filters)} filters exceed {grid.n_blocks} blocks")
    plane = np.zeros((grid.height, grid.width), bool)
    reps = (grid.block_h // k, grid.block_w // k)
    for b, f in enumerate(filters):
        x0, y0 = grid.block_origin(b)
        plane[y0:y0 + grid.block_h, x0:x0 + grid.block_w] = np.tile(f.astype(bool), reps)
    return plane


def broadcast_tap(pe: PEArray, weights: str, k: int, tap: tuple[int, int], dst=TAP, tmp=TMP):
    """Give every PE the filter bit at tap (row, col) of its own k x k tile.

    The tap column is masked out and spread east/west one PE at a time,
    then the tap row is spread south/north: 2(k-1) single-step bit shifts.
    """
    i, j = tap
    if not (0 <= i < k and 0 <= j < k):
        raise ValueError(f"tap {tap} outside [0, {k})^2")
    pe.bit_copy(dst, weights)
    for axis, keep, fwd, back in (("col", j, "E", "W"), ("row", i, "S", "N")):
        pat = mod_pattern(pe.shape, k, col=keep) if axis == "col" else mod_pattern(pe.shape, k, row=keep)
        pe.set_flag("pattern", mask=~pat)
        pe.bit_write(dst, False)
        pe.set_flag("all")
        for _ in range(k - 1 - keep):
            pe.shift_bits(tmp, fwd, 1, src=dst)
            pe.bit_or(dst, dst, tmp)
        for _ in range(keep):
            pe.shift_bits(tmp, back, 1, src=dst)
            pe.bit_or(dst, dst, tmp)


def conv_layer(pe: PEArray, in_reg: str, out_reg: str, weights: str, grid: BlockGrid, k: int,
               isolation: bool = True, label="conv"):
    """All blocks convolve their image with their own binary filter at once.

    out(x, y) = sum_{i,j} s(i,j) * in(x + j, y + i), with s = +1 for a set
    filter bit and -1 otherwise (top-left anchored correlation).
    """
    grid.check(pe)
    if grid.block_w % k or grid.block_h % k:
        raise LayoutError(f"filter size {k} does not divide the block size")
    if in_reg == out_reg:
        raise ValueError("conv_layer needs distinct input and output registers")
    with pe.component(label), pe.isolated(grid.block_w, grid.block_h, isolation):
        pe.write(out_reg, 0.0)
        for i in range(k):
            if i == 0:
                row = in_reg
            else:
                pe.shift(ROW_COPY, "N", 1, src=row)
                row = ROW_COPY
            cur = row
            for j in range(k):
                if j > 0:
                    pe.shift(TAP_COPY, "W", 1, src=cur)
                    cur = TAP_COPY
                broadcast_tap(pe, weights, k, (i, j))
                pe.set_flag("bit", TAP)
                pe.add(out_reg, out_reg, cur)
                pe.set_flag("all")
                pe.bit_not(TMP, TAP)
                pe.set_flag("bit", TMP)
                pe.sub(out_reg, out_reg, cur)
                pe.set_flag("all")


# -- activation and pooling ---------------------------------------------------------

def relu(pe: PEArray, reg: str, label="relu"):
    with pe.component(label):
        pe.set_flag("negative", reg)
        pe.write(reg, 0.0)
        pe.set_flag("all")


def maxpool4(pe: PEArray, reg: str, pool: int = 4, label="maxpool"):
    """Max-pool over aligned pool x pool tiles, result replicated over each tile."""
    if pool & (pool - 1):
        raise ValueError("pool size must be a power of two")
    with pe.component(label):
        # phase 1: each PE gathers the max of the window it anchors top-left
        for direction in ("W", "N"):
            for _ in range(pool - 1):
                pe.shift(TAP_COPY, direction, 1, src=reg)
                pe.sub(SCRATCH, TAP_COPY, reg)
                pe.set_flag("positive", SCRATCH)
                pe.copy(reg, TAP_COPY)
                pe.set_flag("all")
        # phase 2: broadcast tile origins over their tiles
        pe.set_flag("pattern", mask=~mod_pattern(pe.shape, pool, 0, 0))
        pe.write(reg, 0.0)
        pe.set_flag("all")
        for direction in ("E", "S"):
            d = 1
            while d < pool:
                pe.shift(TAP_COPY, direction, d, src=reg)
                pe.add(reg, reg, TAP_COPY)
                d *= 2


# -- digitization -------------------------------------------------------------------

def quant_step(bits: int, range_max: float) -> float:
    return range_max / (2 ** bits - 1)


def code_threshold(code: int, q: float) -> float:
    """Lowest analog value that digitizes to ``code`` (round half up)."""
    return (code - 0.5) * q


def digitize(pe: PEArray, src: str, bit_regs, range_max: float, label=None):
    """Split an analog plane into len(bit_regs) bit planes (LSB first).

    code = round(clamp(v, 0, range_max) / q), halves rounded up, found by a
    per-PE binary search: each bit compares ``src`` against a threshold
    written from the already decided higher bits.
    """
    nb = len(bit_regs)
    if nb < 1:
        raise ValueError("need at least one bit plane")
    if range_max <= 0:
        raise ValueError("range_max must be positive")
    q = quant_step(nb, range_max)
    with pe.component(label or pe.label):
        pe.set_flag("all")
        for b in range(nb - 1, -1, -1):
            higher = bit_regs[b + 1:]
            pe.bit_write(bit_regs[b], True)
            for h in range(2 ** len(higher)):
                if higher:
                    for m, reg in enumerate(higher):
                        if m == 0:
                            (pe.bit_copy if h & 1 else pe.bit_not)(S1, reg)
                        elif h >> m & 1:
                            pe.bit_and(S1, S1, reg)
                        else:
                            pe.bit_not(S2, reg)
                            pe.bit_and(S1, S1, S2)
                    pe.set_flag("bit", S1)
                pe.write(CONST, code_threshold(h * 2 ** (b + 1) + 2 ** b, q))
                pe.set_flag("all")
            pe.set_flag("all")
            pe.sub(SCRATCH, src, CONST)
            pe.set_flag("negative", SCRATCH)
            pe.bit_write(bit_regs[b], False)
            pe.set_flag("all")


def recombine(pe: PEArray, bit_regs, dst: str, range_max: float, label=None):
    """Inverse of :func:`digitize`: dst = code * q."""
    q = quant_step(len(bit_regs), range_max)
    with pe.component(label or pe.label):
        pe.set_flag("all")
        pe.write(dst, 0.0)
        for b, reg in enumerate(bit_regs):
            pe.write(CONST, (2 ** b) * q)
            pe.set_flag("bit", reg)
            pe.add(dst, dst, CONST)
            pe.set_flag("all")


def _compact(pe: PEArray, reg: str, factor: int, axis: str):
    """Keep every factor-th column (or row), packed towards the origin."""
    n = (pe.width if axis == "x" else pe.height) // factor
    y, x = coords(*pe.shape)
    pos = x if axis == "x" else y
    direction = "W" if axis == "x" else "N"
    for s in range(1, n):
        pe.set_flag("pattern", mask=pos >= s)
        pe.shift_bits(reg, direction, factor - 1)
    pe.set_flag("all")


def shrink_and_duplicate(pe: PEArray, src: str, dst: str, grid_in: BlockGrid, factor: int,
                         grid_out: BlockGrid, bits: int = 3, range_max: float = 16.0,
                         label="shrink_duplicate"):
    """Shrink pooled maps by ``factor`` and lay them out for the next conv layer.

    Map ``m`` (block raster order in ``grid_in``) ends up in every block of
    row ``m`` of ``grid_out``. Data travels as ``bits`` digital planes, so
    the result is the 3-bit quantization of the pooled values.
    """
    grid_in.check(pe)
    grid_out.check(pe)
    sw, sh = grid_in.block_w // factor, grid_in.block_h // factor
    if grid_in.block_w % factor or grid_in.block_h % factor:
        raise LayoutError(f"shrink factor {factor} does not divide input blocks")
    if (sw, sh) != (grid_out.block_w, grid_out.block_h):
        raise LayoutError(f"shrunk maps are {sw}x{sh} but output blocks are "
                          f"{grid_out.block_w}x{grid_out.block_h}")
    n_maps = grid_in.n_blocks
    if n_maps > grid_out.blocks_y:
        raise LayoutError(f"{n_maps} maps need {n_maps} block rows, grid has {grid_out.blocks_y}")
    planes = DIGIT_BITS[:bits]
    with pe.component(label):
        digitize(pe, src, planes, range_max)
        region = rect_pattern(pe.shape, 0, 0, grid_in.blocks_x * sw, grid_in.blocks_y * sh)
        for plane in planes:
            _compact(pe, plane, factor, "x")
            _compact(pe, plane, factor, "y")
            pe.set_flag("pattern", mask=~region)
            pe.bit_write(plane, False)
            pe.set_flag("all")
            # move map m from small block (by, bx) to block row m, column 0
            pe.bit_write(S1, False)
            for m in range(n_maps):
                by, bx = divmod(m, grid_in.blocks_x)
                pe.bit_copy(TMP, plane)
                pe.set_flag("pattern", mask=~rect_pattern(pe.shape, bx * sw, by * sh, (bx + 1) * sw, (by + 1) * sh))
                pe.bit_write(TMP, False)
                pe.set_flag("all")
                pe.shift_bits(TMP, "W", bx * sw)
                pe.shift_bits(TMP, "S", (m - by) * sh)
                pe.bit_or(S1, S1, TMP)
            _tile(pe, S1, TMP, grid_out.blocks_x, sw, "E", bits=True)
            pe.bit_copy(plane, S1)
        recombine(pe, planes, dst, range_max)


def accumulate_feature_maps(pe: PEArray, conv_reg: str, grid: BlockGrid, relu_after=True,
                            duplicate=True, label="feature_map_creation"):
    """Sum each block column into its top block, then ReLU and copy back down.

    With block row = input map and block column = output map, the top row
    afterwards holds the new feature maps.
    """
    grid.check(pe)
    with pe.component(label):
        for p in range(1, grid.blocks_y):
            pe.shift(TAP_COPY, "N", grid.block_h, src=conv_reg if p == 1 else TAP_COPY)
            pe.add(conv_reg, conv_reg, TAP_COPY)
        y, _ = coords(*pe.shape)
        pe.set_flag("pattern", mask=y >= grid.block_h)
        pe.write(conv_reg, 0.0)
        pe.set_flag("all")
        if relu_after:
            relu(pe, conv_reg, label=label)
        if duplicate:
            _tile(pe, conv_reg, TAP_COPY, grid.blocks_y, grid.block_h, "S")


# -- fully connected layer ------------------------------------------------------------

class FCMode(enum.Enum):
    POOLED_CHECKERBOARD = "pooled_checkerboard"
    DUPLICATED_MAPS = "duplicated_maps"


@dataclass
class FCLayout:
    mode: FCMode
    weights: np.ndarray          # analog plane with values in {-1, 0, 1}
    masks: np.ndarray            # (10, H, W) bool, one PE selection per neuron
    index: np.ndarray            # (H, W) canonical activation index per PE, -1 if none

    @property
    def n_neurons(self):
        return len(self.masks)


def embed_fc_weights(weights, mode: FCMode, grid: BlockGrid, pool: int = 4) -> FCLayout:
    """Place a ternary (10, n_inputs) matrix next to the activations it multiplies.

    POOLED_CHECKERBOARD: pooled maps sit in ``grid`` blocks; each pool x pool
    tile is one activation patch, neuron n owns in-tile PE
    (x % pool, y % pool) = (n % pool, n // pool).

    DUPLICATED_MAPS: map g lies in block column g and is repeated down the
    columns; neuron n owns block row n.
    """
    w = np.asarray(weights)
    if w.ndim != 2 or w.shape[0] != N_NEURONS:
        raise LayoutError(f"FC weights must be (10, n_inputs), got {w.shape}")
    if not np.isin(w, (-1, 0, 1)).all():
        raise LayoutError("FC weights must be ternary")
    shape = (grid.height, grid.width)
    y, x = coords(*shape)
    index = np.full(shape, -1, np.int64)
    owner = np.full(shape, -1, np.int64)
    if mode is FCMode.POOLED_CHECKERBOARD:
        if pool * pool < N_NEURONS:
            raise LayoutError(f"{pool}x{pool} patches cannot host {N_NEURONS} neurons")
        tx_n, ty_n = grid.block_w // pool, grid.block_h // pool
        n_inputs = grid.n_blocks * tx_n * ty_n
        bx, by = x // grid.block_w, y // grid.block_h
        m = by * grid.blocks_x + bx
        tx, ty = (x % grid.block_w) // pool, (y % grid.block_h) // pool
        index[...] = m * (tx_n * ty_n) + ty * tx_n + tx
        slot = (y % pool) * pool + (x % pool)
        owner[...] = np.where(slot < N_NEURONS, slot, -1)
    elif mode is FCMode.DUPLICATED_MAPS:
        if grid.blocks_y < N_NEURONS:
            raise LayoutError(f"need {N_NEURONS} block rows, grid has {grid.blocks_y}")
        n_inputs = grid.blocks_x * grid.block_w * grid.block_h
        g = x // grid.block_w
        index[...] = g * grid.block_w * grid.block_h + (y % grid.block_h) * grid.block_w + (x % grid.block_w)
        row = y // grid.block_h
        owner[...] = np.where(row < N_NEURONS, row, -1)
    else:
        raise LayoutError(f"unknown FC mode {mode}")
    if w.shape[1] != n_inputs:
        raise LayoutError(f"layout carries {n_inputs} activations, weights expect {w.shape[1]}")
    masks = np.stack([owner == n for n in range(N_NEURONS)])
    plane = np.zeros(shape)
    sel = owner >= 0
    plane[sel] = w[owner[sel], index[sel]]
    index[~sel] = -1
    return FCLayout(mode, plane, masks, index)


def fc_multiply(pe: PEArray, act_reg: str, out_reg: str, weight_reg=FC_W, label="fc"):
    """out = activation * weight per PE using flagged add / subtract."""
    with pe.component(label):
        pe.set_flag("all")
        pe.write(out_reg, 0.0)
        pe.set_flag("positive", weight_reg)
        pe.add(out_reg, out_reg, act_reg)
        pe.set_flag("negative", weight_reg)
        pe.sub(out_reg, out_reg, act_reg)
        pe.set_flag("all")


def analog_neuron_sums(pe: PEArray, layout: FCLayout, reg: str, repeats: int = 1, label="fc") -> np.ndarray:
    """Per-neuron global sums, each repeated ``repeats`` times and averaged."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = np.zeros(layout.n_neurons)
    with pe.component(label):
        for n in range(layout.n_neurons):
            pe.set_flag("pattern", mask=layout.masks[n])
            out[n] = np.mean([pe.global_sum(reg) for _ in range(repeats)])
        pe.set_flag("all")
    return out


def fall_iterations(pe: PEArray) -> int:
    return pe.height - 1


def stack_count(pe: PEArray, reg: str, label="stack_count") -> int:
    """Exact popcount of a bit plane by letting set bits fall into stacks.

    After height-1 parallel fall steps every column is a solid stack on the
    bottom edge; xor with a one-row-down copy leaves only stack tops, whose
    coordinates come back through the event readout.
    """
    not_bottom = coords(*pe.shape)[0] < pe.height - 1
    with pe.component(label):
        pe.set_flag("all")
        if reg != S3:
            pe.bit_copy(S3, reg)
        pe.bit_write(S1, False)
        for _ in range(fall_iterations(pe)):
            pe.set_flag("pattern", mask=not_bottom)
            pe.shift_bits(S2, "N", 1, src=S3)      # occupancy of the cell below
            pe.bit_not(S2, S2)
            pe.bit_and(S1, S3, S2)                 # bits free to fall
            pe.bit_xor(S3, S3, S1)
            pe.set_flag("all")
            pe.shift_bits(S1, "S", 1)
            pe.bit_or(S3, S3, S1)
        pe.shift_bits(S2, "S", 1, src=S3)
        pe.bit_xor(S2, S3, S2)
        tops = pe.event_readout(S2)
    return int(sum(pe.height - y for _, y in tops))


def digital_neuron_sums(pe: PEArray, layout: FCLayout, prod_reg: str, bits: int, range_max: float,
                        weight_reg=FC_W, label="fc") -> np.ndarray:
    """Exact-count neuron sums from a ``bits``-bit digitization of |product|."""
    planes = DIGIT_BITS[:bits]
    q = quant_step(bits, range_max)
    out = np.zeros(layout.n_neurons)
    with pe.component(label):
        pe.set_flag("all")
        # |product| goes to R2: digitize itself uses the scratch register
        pe.copy(ROW_COPY, prod_reg)
        pe.set_flag("negative", weight_reg)
        pe.neg(ROW_COPY, prod_reg)
        pe.set_flag("all")
        digitize(pe, ROW_COPY, planes, range_max)
        pe.bit_write(NEG_MASK, False)
        pe.set_flag("negative", weight_reg)
        pe.bit_write(NEG_MASK, True)
        pe.set_flag("all")
        pe.bit_not(TMP, NEG_MASK)
        for n in range(layout.n_neurons):
            total = 0
            for sign, mask_reg in ((1, TMP), (-1, NEG_MASK)):
                for b, plane in enumerate(planes):
                    pe.bit_and(COUNT, plane, mask_reg)
                    pe.set_flag("pattern", mask=~layout.masks[n])
                    pe.bit_write(COUNT, False)
                    pe.set_flag("all")
                    total += sign * (2 ** b) * stack_count(pe, COUNT, label=label)
            out[n] = q * total
    return out


def argmax_lowest(values) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    return int(np.argmax(np.asarray(values)))

