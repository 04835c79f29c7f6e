//! Cycle-level model of an output-stationary systolic array.
//!
//! Activations enter on the left edge and move one PE to the right per
//! cycle; weights enter on the top edge and move one PE down per cycle. Row
//! `i` of A and column `j` of B are skewed by `i` and `j` cycles, so PE
//! `(i, j)` sees the operand pair with reduction index `t - i - j` at cycle
//! `t`. Accumulators never move.
//!
//! In [`PeMode::Symmetric`] each PE does one int8 x int8 MAC per cycle into a
//! 32-bit accumulator. In [`PeMode::AsymmetricDual`] the 8-bit weight
//! register carries two int4 weights of the same reduction index for two
//! adjacent output columns (low nibble = lower column), and the PE does two
//! MACs per cycle into the two 16-bit halves of the same 32-bit buffer. The
//! array therefore covers `rows x 2*cols` outputs per pass.
//!
//! Each PE folds its products into the accumulator in groups of eight
//! consecutive reduction indices, the same granularity as the matrix-MAC
//! instructions, so the final state is bit-identical to the GEMM kernels in
//! every [`AccMode`].

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::isa::{AccCell, AccMode, K_DEPTH};
use crate::matrix::{round_up, I4MatrixPacked, I8Matrix, Matrix};

/// Bits of accumulator storage per PE, identical in both modes.
pub const PE_ACCUMULATOR_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    #[default]
    Symmetric,
    AsymmetricDual,
}

impl PeMode {
    /// Accumulator lanes (and MACs per cycle) per PE.
    pub fn lanes(self) -> usize {
        match self {
            Self::Symmetric => 1,
            Self::AsymmetricDual => 2,
        }
    }

    pub fn lane_bits(self) -> u32 {
        PE_ACCUMULATOR_BITS / self.lanes() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaConfig {
    pub rows: usize,
    pub cols: usize,
    pub pe_mode: PeMode,
    pub acc_mode: AccMode,
}

impl SaConfig {
    pub fn new(rows: usize, cols: usize, pe_mode: PeMode, acc_mode: AccMode) -> Result<Self> {
        let cfg = Self {
            rows,
            cols,
            pe_mode,
            acc_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(shape(format!(
                "array must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Output columns covered by one pass.
    pub fn tile_n(&self) -> usize {
        self.cols * self.pe_mode.lanes()
    }

    /// Cycles of one pass over a reduction of depth `k`: the skewed wavefront
    /// reaches the far corner after `rows + cols - 2` cycles.
    pub fn pass_cycles(&self, k: usize) -> u64 {
        (k + self.rows + self.cols - 2) as u64
    }
}

/// Second operand, matching the PE mode.
#[derive(Clone, Copy, Debug)]
pub enum WeightOperand<'a> {
    Int8(&'a I8Matrix),
    Int4(&'a I4MatrixPacked),
}

impl WeightOperand<'_> {
    fn shape(&self) -> (usize, usize) {
        match self {
            Self::Int8(m) => (m.rows(), m.cols()),
            Self::Int4(m) => (m.rows(), m.cols()),
        }
    }

    fn get(&self, r: usize, c: usize) -> i8 {
        let (rows, cols) = self.shape();
        if r >= rows || c >= cols {
            return 0;
        }
        match self {
            Self::Int8(m) => m.get(r, c),
            Self::Int4(m) => m.get(r, c),
        }
    }
}

/// Operand registers and accumulator of one PE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PeState {
    /// Activation and its reduction index.
    pub a_reg: Option<(i8, usize)>,
    /// Raw 8-bit weight register (one int8 or two packed int4) and its reduction index.
    pub b_reg: Option<(u8, usize)>,
    /// Exact products of the current 8-deep group, per lane.
    pub partial: [i64; 2],
    /// One 32-bit accumulator, or two 16-bit halves.
    pub acc: [AccCell; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaTrace {
    pub cycles: u64,
    pub passes: u64,
    /// MAC slots fired, `lanes` per active PE per cycle (padding included).
    pub macs_performed: u64,
    /// Operand register transfers between PEs.
    pub transfers: u64,
    /// Largest Manhattan distance covered by one transfer in one cycle.
    pub max_hop: usize,
    /// Active PEs per cycle, when requested.
    pub activity: Option<Vec<u32>>,
    pub acc_bits: u32,
    pub values: Matrix<i64>,
    pub sticky: Matrix<bool>,
    pub overflow_events: Matrix<u32>,
}

impl SaTrace {
    pub fn macs_per_cycle(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.macs_performed as f64 / self.cycles as f64
        }
    }
}

fn hop(from: (usize, usize), to: (usize, usize)) -> usize {
    from.0.abs_diff(to.0) + from.1.abs_diff(to.1)
}

fn decode_nibble(n: u8) -> i8 {
    ((n << 4) as i8) >> 4
}

fn check_problem(a: &I8Matrix, b: &WeightOperand<'_>, cfg: &SaConfig) -> Result<()> {
    cfg.validate()?;
    match (cfg.pe_mode, b) {
        (PeMode::Symmetric, WeightOperand::Int8(_))
        | (PeMode::AsymmetricDual, WeightOperand::Int4(_)) => {}
        (mode, _) => {
            return Err(Error::ModeMismatch(format!(
                "{mode:?} PEs need {} weights",
                if mode == PeMode::Symmetric {
                    "int8"
                } else {
                    "packed int4"
                }
            )))
        }
    }
    let (k_b, n) = b.shape();
    if a.cols() != k_b {
        return Err(shape(format!(
            "inner dimensions differ: {}x{} * {k_b}x{n}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 || a.cols() == 0 || n == 0 {
        return Err(shape(format!(
            "problem {}x{}x{n} has a zero dimension",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

pub fn simulate(a: &I8Matrix, b: WeightOperand<'_>, cfg: &SaConfig) -> Result<SaTrace> {
    simulate_traced(a, b, cfg, false)
}

/// Runs the array to completion; `record_activity` keeps the per-cycle active-PE counts.
pub fn simulate_traced(
    a: &I8Matrix,
    b: WeightOperand<'_>,
    cfg: &SaConfig,
    record_activity: bool,
) -> Result<SaTrace> {
    check_problem(a, &b, cfg)?;
    let (m, k) = (a.rows(), a.cols());
    let n = b.shape().1;
    let (rows, cols) = (cfg.rows, cfg.cols);
    let lanes = cfg.pe_mode.lanes();
    let bits = cfg.pe_mode.lane_bits();
    let tile_n = cfg.tile_n();
    let tiles_m = m.div_ceil(rows);
    let tiles_n = n.div_ceil(tile_n);
    let pass_cycles = cfg.pass_cycles(k);

    let mut values = Matrix::zeros(m, n);
    let mut sticky = Matrix::zeros(m, n);
    let mut events = Matrix::zeros(m, n);
    let mut activity = record_activity.then(Vec::new);
    let mut macs_performed = 0u64;
    let mut transfers = 0u64;
    let mut max_hop = 0usize;

    let weight_word = |kk: usize, col0: usize| -> u8 {
        match cfg.pe_mode {
            PeMode::Symmetric => b.get(kk, col0) as u8,
            PeMode::AsymmetricDual => {
                let lo = b.get(kk, col0) as u8 & 0x0F;
                let hi = b.get(kk, col0 + 1) as u8 & 0x0F;
                lo | (hi << 4)
            }
        }
    };

    let mut grid = vec![PeState::default(); rows * cols];
    for tm in 0..tiles_m {
        for tn in 0..tiles_n {
            grid.iter_mut().for_each(|pe| *pe = PeState::default());
            let row0 = tm * rows;
            let col0 = tn * tile_n;

            for t in 0..pass_cycles as usize {
                // Shift registers: iterate away from the injection edge so
                // every PE reads its neighbour's value from the previous cycle.
                for i in 0..rows {
                    for j in (1..cols).rev() {
                        let moved = grid[i * cols + j - 1].a_reg;
                        if moved.is_some() {
                            transfers += 1;
                            max_hop = max_hop.max(hop((i, j - 1), (i, j)));
                        }
                        grid[i * cols + j].a_reg = moved;
                    }
                    grid[i * cols].a_reg = t.checked_sub(i).filter(|&kk| kk < k).map(|kk| {
                        let r = row0 + i;
                        (if r < m { a.get(r, kk) } else { 0 }, kk)
                    });
                }
                for j in 0..cols {
                    for i in (1..rows).rev() {
                        let moved = grid[(i - 1) * cols + j].b_reg;
                        if moved.is_some() {
                            transfers += 1;
                            max_hop = max_hop.max(hop((i - 1, j), (i, j)));
                        }
                        grid[i * cols + j].b_reg = moved;
                    }
                    grid[j].b_reg = t
                        .checked_sub(j)
                        .filter(|&kk| kk < k)
                        .map(|kk| (weight_word(kk, col0 + j * lanes), kk));
                }

                let mut active = 0u32;
                for pe in grid.iter_mut() {
                    let (Some((av, ak)), Some((bw, bk))) = (pe.a_reg, pe.b_reg) else {
                        continue;
                    };
                    debug_assert_eq!(ak, bk, "skew misaligned operands");
                    active += 1;
                    match cfg.pe_mode {
                        PeMode::Symmetric => pe.partial[0] += av as i64 * (bw as i8) as i64,
                        PeMode::AsymmetricDual => {
                            pe.partial[0] += av as i64 * decode_nibble(bw & 0x0F) as i64;
                            pe.partial[1] += av as i64 * decode_nibble(bw >> 4) as i64;
                        }
                    }
                    if (ak + 1) % K_DEPTH == 0 || ak + 1 == k {
                        for l in 0..lanes {
                            pe.acc[l].accumulate(pe.partial[l], bits, cfg.acc_mode);
                            pe.partial[l] = 0;
                        }
                    }
                }
                macs_performed += active as u64 * lanes as u64;
                if let Some(act) = activity.as_mut() {
                    act.push(active);
                }
            }

            for i in 0..rows {
                for j in 0..cols {
                    for l in 0..lanes {
                        let (r, c) = (row0 + i, col0 + j * lanes + l);
                        if r < m && c < n {
                            let cell = grid[i * cols + j].acc[l];
                            values.set(r, c, cell.value);
                            sticky.set(r, c, cell.sticky);
                            events.set(r, c, cell.events);
                        }
                    }
                }
            }
        }
    }

    Ok(SaTrace {
        cycles: (tiles_m * tiles_n) as u64 * pass_cycles,
        passes: (tiles_m * tiles_n) as u64,
        macs_performed,
        transfers,
        max_hop,
        activity,
        acc_bits: bits,
        values,
        sticky,
        overflow_events: events,
    })
}

/// Closed-form cycle count: one `k + rows + cols - 2` pass per output tile.
pub fn analytic_cycles(m: usize, k: usize, n: usize, cfg: &SaConfig) -> u64 {
    let tiles_m = m.div_ceil(cfg.rows) as u64;
    let tiles_n = n.div_ceil(cfg.tile_n()) as u64;
    tiles_m * tiles_n * cfg.pass_cycles(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeThroughput {
    pub cycles: u64,
    pub macs_performed: u64,
    /// MAC slots per cycle including fill and drain.
    pub macs_per_cycle: f64,
    /// Problem MACs (`m * k * n`) per cycle including fill and drain.
    pub useful_macs_per_cycle: f64,
    /// Cycles in which every PE was busy.
    pub steady_cycles: u64,
    /// MAC slots per cycle over the steady cycles only.
    pub steady_macs_per_cycle: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputComparison {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: ModeThroughput,
    pub asymmetric: ModeThroughput,
    /// Ratio of problem MACs per cycle, fill and drain included.
    pub ratio_with_fill_drain: f64,
    /// Ratio of steady-state MACs per cycle; `None` without a full-occupancy cycle.
    pub ratio_steady: Option<f64>,
}

fn mode_throughput(
    m: usize,
    k: usize,
    n: usize,
    rows: usize,
    cols: usize,
    pe_mode: PeMode,
) -> Result<ModeThroughput> {
    let cfg = SaConfig::new(rows, cols, pe_mode, AccMode::Wrapping)?;
    let a = I8Matrix::zeros(m, k);
    let trace = match pe_mode {
        PeMode::Symmetric => {
            simulate_traced(&a, WeightOperand::Int8(&I8Matrix::zeros(k, n)), &cfg, true)?
        }
        PeMode::AsymmetricDual => simulate_traced(
            &a,
            WeightOperand::Int4(&I4MatrixPacked::zeros(k, n)),
            &cfg,
            true,
        )?,
    };
    let full = (rows * cols) as u32;
    let activity = trace.activity.as_deref().unwrap_or_default();
    let steady_cycles = activity.iter().filter(|&&x| x == full).count() as u64;
    let steady_macs: u64 = activity
        .iter()
        .filter(|&&x| x == full)
        .map(|&x| x as u64 * pe_mode.lanes() as u64)
        .sum();
    Ok(ModeThroughput {
        cycles: trace.cycles,
        macs_performed: trace.macs_performed,
        macs_per_cycle: trace.macs_per_cycle(),
        useful_macs_per_cycle: (m * k * n) as f64 / trace.cycles as f64,
        steady_cycles,
        steady_macs_per_cycle: (steady_cycles > 0)
            .then(|| steady_macs as f64 / steady_cycles as f64),
    })
}

/// Simulates both PE modes on the same problem and compares throughput.
pub fn throughput_compare(
    m: usize,
    k: usize,
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<ThroughputComparison> {
    if m == 0 || k == 0 || n == 0 {
        return Err(shape(format!("problem {m}x{k}x{n} has a zero dimension")));
    }
    let symmetric = mode_throughput(m, k, n, rows, cols, PeMode::Symmetric)?;
    let asymmetric = mode_throughput(m, k, n, rows, cols, PeMode::AsymmetricDual)?;
    let ratio_steady = match (
        symmetric.steady_macs_per_cycle,
        asymmetric.steady_macs_per_cycle,
    ) {
        (Some(s), Some(a)) => Some(a / s),
        _ => None,
    };
    Ok(ThroughputComparison {
        m,
        k,
        n,
        rows,
        cols,
        ratio_with_fill_drain: asymmetric.useful_macs_per_cycle / symmetric.useful_macs_per_cycle,
        symmetric,
        asymmetric,
        ratio_steady,
    })
}

/// Padded problem size the array actually sweeps.
pub fn padded_extent(m: usize, n: usize, cfg: &SaConfig) -> (usize, usize) {
    (round_up(m, cfg.rows), round_up(n, cfg.tile_n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::pack_int4;

    fn cfg(rows: usize, cols: usize, pe_mode: PeMode) -> SaConfig {
        SaConfig::new(rows, cols, pe_mode, AccMode::Wrapping).unwrap()
    }

    #[test]
    fn single_pe_single_mac() {
        let a = I8Matrix::new(1, 1, vec![-7]).unwrap();
        let b = I8Matrix::new(1, 1, vec![9]).unwrap();
        let t = simulate(&a, WeightOperand::Int8(&b), &cfg(1, 1, PeMode::Symmetric)).unwrap();
        assert_eq!(t.cycles, 1);
        assert_eq!(t.values.data(), &[-63]);
        assert_eq!(t.macs_performed, 1);
        assert_eq!(analytic_cycles(1, 1, 1, &cfg(1, 1, PeMode::Symmetric)), 1);
    }

    #[test]
    fn single_tile_timing() {
        let c = cfg(4, 4, PeMode::Symmetric);
        let a = I8Matrix::from_fn(4, 8, |r, k| (r + k) as i8);
        let b = I8Matrix::from_fn(8, 4, |k, c| k as i8 - c as i8);
        let t = simulate_traced(&a, WeightOperand::Int8(&b), &c, true).unwrap();
        assert_eq!(t.cycles, 14);
        assert_eq!(analytic_cycles(4, 8, 4, &c), 14);
        assert_eq!(t.macs_performed, 4 * 8 * 4);
        assert_eq!(
            t.activity
                .as_ref()
                .unwrap()
                .iter()
                .map(|&x| x as u64)
                .sum::<u64>(),
            128
        );
        assert_eq!(t.max_hop, 1);

        let d = cfg(4, 4, PeMode::AsymmetricDual);
        let w = I4MatrixPacked::zeros(8, 4);
        let t2 = simulate(&a, WeightOperand::Int4(&w), &d).unwrap();
        assert_eq!(t2.cycles, 14);
        assert_eq!(t2.macs_performed, 2 * t.macs_performed);
    }

    #[test]
    fn mode_mismatch_and_shape_errors() {
        let a = I8Matrix::zeros(2, 2);
        let b8 = I8Matrix::zeros(2, 2);
        let b4 = I4MatrixPacked::zeros(2, 2);
        assert!(matches!(
            simulate(&a, WeightOperand::Int4(&b4), &cfg(2, 2, PeMode::Symmetric)),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            simulate(
                &a,
                WeightOperand::Int8(&b8),
                &cfg(2, 2, PeMode::AsymmetricDual)
            ),
            Err(Error::ModeMismatch(_))
        ));
        assert!(simulate(
            &a,
            WeightOperand::Int8(&I8Matrix::zeros(3, 2)),
            &cfg(2, 2, PeMode::Symmetric)
        )
        .is_err());
        assert!(SaConfig::new(0, 2, PeMode::Symmetric, AccMode::Wrapping).is_err());
        assert!(throughput_compare(0, 1, 1, 4, 4).is_err());
    }

    #[test]
    fn dual_mode_maps_nibbles_to_adjacent_columns() {
        let a = I8Matrix::new(1, 1, vec![3]).unwrap();
        let w = pack_int4(&[-8, 5], 1, 2).unwrap();
        let t = simulate(
            &a,
            WeightOperand::Int4(&w),
            &cfg(1, 1, PeMode::AsymmetricDual),
        )
        .unwrap();
        assert_eq!(t.values.data(), &[-24, 15]);
        assert_eq!(t.acc_bits, 16);
    }

    #[test]
    fn accumulator_footprint_is_constant() {
        for mode in [PeMode::Symmetric, PeMode::AsymmetricDual] {
            assert_eq!(mode.lanes() as u32 * mode.lane_bits(), PE_ACCUMULATOR_BITS);
        }
    }

    #[test]
    fn steady_state_ratio_is_two() {
        let cmp = throughput_compare(8, 64, 16, 4, 4).unwrap();
        assert_eq!(cmp.symmetric.steady_macs_per_cycle, Some(16.0));
        assert_eq!(cmp.asymmetric.steady_macs_per_cycle, Some(32.0));
        assert_eq!(cmp.ratio_steady, Some(2.0));
        assert_eq!(cmp.ratio_with_fill_drain, 2.0);

        let tiny = throughput_compare(4, 2, 4, 4, 4).unwrap();
        assert_eq!(tiny.ratio_steady, None);
        assert!(tiny.ratio_with_fill_drain < 2.0);
    }
}
