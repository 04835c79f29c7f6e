//! Tiled GEMM built from the matrix-MAC instructions.
//!
//! Operands are zero-padded to whole instruction tiles (M to 2, K to 8, N to
//! 2 or 4) and the result cropped back. The output is swept in blocks of two
//! row pairs by two column tiles. Per block, the reduction dimension is the
//! outer loop: each k step loads the A registers of both row pairs and the B
//! registers of both column tiles once, then issues every row-pair x
//! column-tile instruction (top x top, top x bottom, bottom x top,
//! bottom x bottom), so each loaded register feeds two instructions.
//!
//! Loads are counted as 128-bit register fills.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::isa::{
    self, check_acc_bits, AccCell, AccMode, AccTile16, AccTile32, AMMLA_MACS, K_DEPTH, SMMLA_MACS,
};
use crate::matrix::{
    extract_reg_a, extract_reg_b4, extract_reg_b8, round_up, widen_int4_to_int8, Extension,
    I4MatrixPacked, I8Matrix, Matrix, OperandRegA, OperandRegB4, OperandRegB8,
};

const ROW_PAIRS_PER_BLOCK: usize = 2;
const COL_TILES_PER_BLOCK: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmCounters {
    pub mac_instructions: u64,
    pub load_ops: u64,
    pub macs: u64,
    pub output_elements: u64,
}

impl AddAssign for GemmCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.mac_instructions += rhs.mac_instructions;
        self.load_ops += rhs.load_ops;
        self.macs += rhs.macs;
        self.output_elements += rhs.output_elements;
    }
}

impl Add for GemmCounters {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

/// Sequential or rayon-parallel sweep over output blocks. Both produce
/// bitwise-identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GemmOutput<T> {
    pub values: Matrix<T>,
    pub sticky: Matrix<bool>,
    pub overflow_events: Matrix<u32>,
    pub counters: GemmCounters,
}

impl<T> GemmOutput<T> {
    /// Accumulate steps that left the accumulator range (`ExactTracking` only).
    pub fn overflow_steps(&self) -> u64 {
        self.overflow_events.data().iter().map(|&e| e as u64).sum()
    }

    pub fn elements_with_overflow(&self) -> usize {
        self.overflow_events
            .data()
            .iter()
            .filter(|&&e| e > 0)
            .count()
    }
}

/// Exact product of an int8 matrix and an int8 (or widened int4) matrix.
pub fn gemm_reference(a: &I8Matrix, b: &I8Matrix) -> Result<Matrix<i64>> {
    if a.cols() != b.rows() {
        return Err(shape(format!(
            "inner dimensions differ: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut sum = 0i64;
            for k in 0..a.cols() {
                sum += a.get(i, k) as i64 * b.get(k, j) as i64;
            }
            out.set(i, j, sum);
        }
    }
    Ok(out)
}

pub fn gemm_reference_i4(a: &I8Matrix, b: &I4MatrixPacked) -> Result<Matrix<i64>> {
    gemm_reference(a, &widen_int4_to_int8(b, Extension::Sign))
}

/// One instruction flavour plus its pre-padded B operand.
trait Kernel: Sync {
    const TILE_N: usize;
    type Tile: Copy + Send;
    type BReg: Copy;

    fn new_tile(&self) -> Self::Tile;
    fn load_b(&self, k_block: usize, col_tile: usize) -> Self::BReg;
    fn issue(&self, tile: &mut Self::Tile, a: &OperandRegA, b: &Self::BReg, mode: AccMode);
    fn cell(tile: &Self::Tile, i: usize, j: usize) -> AccCell;
    fn macs_per_instruction() -> u64;
}

struct Symmetric<'a> {
    b: &'a I8Matrix,
}

impl Kernel for Symmetric<'_> {
    const TILE_N: usize = 2;
    type Tile = AccTile32;
    type BReg = OperandRegB8;

    fn new_tile(&self) -> AccTile32 {
        AccTile32::new()
    }

    fn load_b(&self, k_block: usize, col_tile: usize) -> OperandRegB8 {
        extract_reg_b8(self.b, k_block, col_tile).expect("padded operand covers every tile")
    }

    fn issue(&self, tile: &mut AccTile32, a: &OperandRegA, b: &OperandRegB8, mode: AccMode) {
        isa::smmla_in_place(tile, a, b, mode);
    }

    fn cell(tile: &AccTile32, i: usize, j: usize) -> AccCell {
        *tile.cell(i, j)
    }

    fn macs_per_instruction() -> u64 {
        SMMLA_MACS
    }
}

struct Asymmetric<'a> {
    b: &'a I4MatrixPacked,
    bits: u32,
}

impl Kernel for Asymmetric<'_> {
    const TILE_N: usize = 4;
    type Tile = AccTile16;
    type BReg = OperandRegB4;

    fn new_tile(&self) -> AccTile16 {
        AccTile16::with_width(self.bits).expect("width validated before dispatch")
    }

    fn load_b(&self, k_block: usize, col_tile: usize) -> OperandRegB4 {
        extract_reg_b4(self.b, k_block, col_tile).expect("padded operand covers every tile")
    }

    fn issue(&self, tile: &mut AccTile16, a: &OperandRegA, b: &OperandRegB4, mode: AccMode) {
        isa::ammla_in_place(tile, a, b, mode);
    }

    fn cell(tile: &AccTile16, i: usize, j: usize) -> AccCell {
        *tile.cell(i, j)
    }

    fn macs_per_instruction() -> u64 {
        AMMLA_MACS
    }
}

/// Symmetric instruction fed with int4 weights sign-extended at load time.
struct Widening<'a> {
    b: &'a I4MatrixPacked,
}

impl Kernel for Widening<'_> {
    const TILE_N: usize = 2;
    type Tile = AccTile32;
    type BReg = OperandRegB8;

    fn new_tile(&self) -> AccTile32 {
        AccTile32::new()
    }

    fn load_b(&self, k_block: usize, col_tile: usize) -> OperandRegB8 {
        isa::load_widened_b(self.b, k_block, col_tile).expect("padded operand covers every tile")
    }

    fn issue(&self, tile: &mut AccTile32, a: &OperandRegA, b: &OperandRegB8, mode: AccMode) {
        isa::smmla_in_place(tile, a, b, mode);
    }

    fn cell(tile: &AccTile32, i: usize, j: usize) -> AccCell {
        *tile.cell(i, j)
    }

    fn macs_per_instruction() -> u64 {
        SMMLA_MACS
    }
}

struct BlockResult {
    row_pairs: std::ops::Range<usize>,
    col_tiles: std::ops::Range<usize>,
    cells: Vec<AccCell>,
    counters: GemmCounters,
}

fn run_block<K: Kernel>(
    kernel: &K,
    a: &I8Matrix,
    k_blocks: usize,
    row_pairs: std::ops::Range<usize>,
    col_tiles: std::ops::Range<usize>,
    mode: AccMode,
) -> BlockResult {
    let nr = row_pairs.len();
    let nc = col_tiles.len();
    let mut tiles = vec![kernel.new_tile(); nr * nc];
    let mut counters = GemmCounters::default();
    let mut a_regs = Vec::with_capacity(nr);
    let mut b_regs = Vec::with_capacity(nc);

    for kb in 0..k_blocks {
        a_regs.clear();
        b_regs.clear();
        a_regs.extend(
            row_pairs
                .clone()
                .map(|rp| extract_reg_a(a, rp, kb).expect("padded operand covers every tile")),
        );
        b_regs.extend(col_tiles.clone().map(|ct| kernel.load_b(kb, ct)));
        counters.load_ops += (nr + nc) as u64;

        for (x, a_reg) in a_regs.iter().enumerate() {
            for (y, b_reg) in b_regs.iter().enumerate() {
                kernel.issue(&mut tiles[x * nc + y], a_reg, b_reg, mode);
                counters.mac_instructions += 1;
            }
        }
    }
    counters.macs = counters.mac_instructions * K::macs_per_instruction();

    let mut cells = Vec::with_capacity(nr * nc * 2 * K::TILE_N);
    for x in 0..nr {
        for i in 0..2 {
            for y in 0..nc {
                for j in 0..K::TILE_N {
                    cells.push(K::cell(&tiles[x * nc + y], i, j));
                }
            }
        }
    }
    BlockResult {
        row_pairs,
        col_tiles,
        cells,
        counters,
    }
}

fn blocks(
    row_pairs: usize,
    col_tiles: usize,
) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    for r in (0..row_pairs).step_by(ROW_PAIRS_PER_BLOCK) {
        for c in (0..col_tiles).step_by(COL_TILES_PER_BLOCK) {
            out.push((
                r..(r + ROW_PAIRS_PER_BLOCK).min(row_pairs),
                c..(c + COL_TILES_PER_BLOCK).min(col_tiles),
            ));
        }
    }
    out
}

/// Runs a padded GEMM and returns the cropped `m x n` accumulator cells.
fn run<K: Kernel>(
    kernel: &K,
    a_padded: &I8Matrix,
    (m, n): (usize, usize),
    np: usize,
    mode: AccMode,
    schedule: Schedule,
) -> (Matrix<AccCell>, GemmCounters) {
    let row_pairs = a_padded.rows() / 2;
    let col_tiles = np / K::TILE_N;
    let k_blocks = a_padded.cols() / K_DEPTH;
    let plan = blocks(row_pairs, col_tiles);

    let job = |(rp, ct): &(std::ops::Range<usize>, std::ops::Range<usize>)| {
        run_block(kernel, a_padded, k_blocks, rp.clone(), ct.clone(), mode)
    };
    let results: Vec<BlockResult> = match schedule {
        Schedule::Sequential => plan.iter().map(job).collect(),
        Schedule::Parallel => plan.par_iter().map(job).collect(),
    };

    let mut cells = Matrix::zeros(m, n);
    let mut counters = GemmCounters::default();
    for block in results {
        counters += block.counters;
        let width = block.col_tiles.len() * K::TILE_N;
        let r0 = block.row_pairs.start * 2;
        let c0 = block.col_tiles.start * K::TILE_N;
        for (idx, cell) in block.cells.into_iter().enumerate() {
            let (r, c) = (r0 + idx / width, c0 + idx % width);
            if r < m && c < n {
                cells.set(r, c, cell);
            }
        }
    }
    counters.output_elements = (m * n) as u64;
    (cells, counters)
}

fn check_inner(a: &I8Matrix, b_rows: usize, b_cols: usize) -> Result<()> {
    if a.cols() != b_rows {
        return Err(shape(format!(
            "inner dimensions differ: {}x{} * {b_rows}x{b_cols}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

fn finish<T: Copy + Default>(
    cells: Matrix<AccCell>,
    counters: GemmCounters,
    value: impl Fn(i64) -> T,
) -> GemmOutput<T> {
    GemmOutput {
        values: cells.map(|c| value(c.value)),
        sticky: cells.map(|c| c.sticky),
        overflow_events: cells.map(|c| c.events),
        counters,
    }
}

pub fn gemm_symmetric(a: &I8Matrix, b: &I8Matrix, mode: AccMode) -> Result<GemmOutput<i32>> {
    gemm_symmetric_with(a, b, mode, Schedule::Sequential)
}

/// int8 x int8 GEMM on `smmla`.
pub fn gemm_symmetric_with(
    a: &I8Matrix,
    b: &I8Matrix,
    mode: AccMode,
    schedule: Schedule,
) -> Result<GemmOutput<i32>> {
    check_inner(a, b.rows(), b.cols())?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (mp, kp, np) = (round_up(m, 2), round_up(k, K_DEPTH), round_up(n, 2));
    let a_p = a.padded(mp, kp)?;
    let b_p = b.padded(kp, np)?;
    let (cells, counters) = run(&Symmetric { b: &b_p }, &a_p, (m, n), np, mode, schedule);
    Ok(finish(cells, counters, |v| v as i32))
}

/// int8 x int4 GEMM on `ammla` with 16-bit accumulators.
pub fn gemm_asymmetric(a: &I8Matrix, b: &I4MatrixPacked, mode: AccMode) -> Result<GemmOutput<i16>> {
    let out = gemm_asymmetric_with(a, b, mode, 16, Schedule::Sequential)?;
    Ok(GemmOutput {
        values: out.values.map(|v| v as i16),
        sticky: out.sticky,
        overflow_events: out.overflow_events,
        counters: out.counters,
    })
}

/// int8 x int4 GEMM on `ammla` with `acc_bits`-wide accumulators (8..=32).
pub fn gemm_asymmetric_with(
    a: &I8Matrix,
    b: &I4MatrixPacked,
    mode: AccMode,
    acc_bits: u32,
    schedule: Schedule,
) -> Result<GemmOutput<i64>> {
    check_acc_bits(acc_bits)?;
    check_inner(a, b.rows(), b.cols())?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (mp, kp, np) = (round_up(m, 2), round_up(k, K_DEPTH), round_up(n, 4));
    let a_p = a.padded(mp, kp)?;
    let b_p = b.padded(kp, np)?;
    let kernel = Asymmetric {
        b: &b_p,
        bits: acc_bits,
    };
    let (cells, counters) = run(&kernel, &a_p, (m, n), np, mode, schedule);
    Ok(finish(cells, counters, |v| v))
}

/// int8 x int4 GEMM on `smmla`, sign-extending the packed weights at load.
pub fn gemm_widening(a: &I8Matrix, b: &I4MatrixPacked, mode: AccMode) -> Result<GemmOutput<i32>> {
    check_inner(a, b.rows(), b.cols())?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (mp, kp, np) = (round_up(m, 2), round_up(k, K_DEPTH), round_up(n, 2));
    let a_p = a.padded(mp, kp)?;
    let b_p = b.padded(kp, np)?;
    let (cells, counters) = run(
        &Widening { b: &b_p },
        &a_p,
        (m, n),
        np,
        mode,
        Schedule::Sequential,
    );
    Ok(finish(cells, counters, |v| v as i32))
}

/// Counters the tiled loop would produce, without executing it.
pub fn plan_counters(
    m: usize,
    k: usize,
    n: usize,
    tile_n: usize,
    macs_per_instruction: u64,
) -> GemmCounters {
    let row_pairs = round_up(m, 2) / 2;
    let col_tiles = round_up(n, tile_n) / tile_n;
    let k_blocks = (round_up(k, K_DEPTH) / K_DEPTH) as u64;
    let row_blocks = row_pairs.div_ceil(ROW_PAIRS_PER_BLOCK) as u64;
    let col_blocks = col_tiles.div_ceil(COL_TILES_PER_BLOCK) as u64;
    let instructions = (row_pairs * col_tiles) as u64 * k_blocks;
    GemmCounters {
        mac_instructions: instructions,
        load_ops: k_blocks * (row_pairs as u64 * col_blocks + col_tiles as u64 * row_blocks),
        macs: instructions * macs_per_instruction,
        output_elements: (m * n) as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub sym_instructions: u64,
    pub asym_instructions: u64,
    pub sym_loads: u64,
    pub asym_loads: u64,
    pub ratio: f64,
}

/// Instruction counts of both GEMM paths for a tile-aligned problem
/// (M multiple of 2, K of 8, N of 4).
pub fn throughput_report(m: usize, k: usize, n: usize) -> Result<ThroughputReport> {
    if m == 0 || k == 0 || n == 0 {
        return Err(shape(format!(
            "dimensions must be positive, got {m}x{k}x{n}"
        )));
    }
    if !m.is_multiple_of(2) || !k.is_multiple_of(K_DEPTH) || !n.is_multiple_of(4) {
        return Err(shape(format!(
            "{m}x{k}x{n} is not tile-aligned (M % 2, K % 8, N % 4 must be 0)"
        )));
    }
    let sym = plan_counters(m, k, n, 2, SMMLA_MACS);
    let asym = plan_counters(m, k, n, 4, AMMLA_MACS);
    Ok(ThroughputReport {
        m,
        k,
        n,
        sym_instructions: sym.mac_instructions,
        asym_instructions: asym.mac_instructions,
        sym_loads: sym.load_ops,
        asym_loads: asym.load_ops,
        ratio: sym.mac_instructions as f64 / asym.mac_instructions as f64,
    })
}
