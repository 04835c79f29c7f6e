//! Reference semantics of the 128-bit matrix multiply-accumulate instructions.
//!
//! * `smmla`: 2x8 int8 x 8x2 int8, accumulating into a 2x2 tile of int32.
//! * `ammla`: 2x8 int8 x 8x4 int4, accumulating into a 2x4 tile of int16.
//!
//! Both read 256 bits of source operands and update a 128-bit destination;
//! `ammla` consumes twice the weights and produces twice the outputs.
//!
//! Each instruction first forms the eight-product dot contribution for every
//! output element exactly, then folds it into the accumulator according to
//! [`AccMode`]. An element overflows on a step when the exact running sum
//! after that step lies outside the accumulator range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{I4MatrixPacked, OperandRegA, OperandRegB4, OperandRegB8};

/// Products folded into each output element by one instruction.
pub const K_DEPTH: usize = 8;
/// Scalar MACs per `smmla` (2 x 2 x 8).
pub const SMMLA_MACS: u64 = 32;
/// Scalar MACs per `ammla` (2 x 4 x 8).
pub const AMMLA_MACS: u64 = 64;

pub const MIN_ACC_BITS: u32 = 8;
pub const MAX_ACC_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccMode {
    /// Two's-complement modular accumulation.
    #[default]
    Wrapping,
    /// Clamp to the range extremes on overflow and latch there.
    SaturatingSticky,
    /// Wrapping values plus a 64-bit exact side sum and per-element overflow counters.
    ExactTracking,
}

/// Inclusive signed range of a `bits`-wide accumulator.
#[inline]
pub fn acc_bounds(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

/// Reduces `x` into the signed `bits`-wide range modulo `2^bits`.
#[inline]
pub fn wrap_to_bits(x: i64, bits: u32) -> i64 {
    let shift = 64 - bits;
    (x << shift) >> shift
}

pub fn check_acc_bits(bits: u32) -> Result<()> {
    if (MIN_ACC_BITS..=MAX_ACC_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Width(bits))
    }
}

/// State of one accumulator element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccCell {
    /// Architectural value, always inside the accumulator range.
    pub value: i64,
    /// Latched by `SaturatingSticky` on the first overflow.
    pub sticky: bool,
    /// Exact running sum.
    pub exact: i64,
    /// Overflowing steps, counted in `ExactTracking` mode.
    pub events: u32,
}

impl AccCell {
    pub fn new(value: i64) -> Self {
        Self {
            value,
            exact: value,
            ..Self::default()
        }
    }

    /// Folds one exact dot contribution into the element.
    #[inline]
    pub fn accumulate(&mut self, contribution: i64, bits: u32, mode: AccMode) {
        let (lo, hi) = acc_bounds(bits);
        self.exact += contribution;
        match mode {
            AccMode::Wrapping => self.value = wrap_to_bits(self.value + contribution, bits),
            AccMode::SaturatingSticky => {
                if !self.sticky {
                    let sum = self.value + contribution;
                    if sum < lo || sum > hi {
                        self.value = sum.clamp(lo, hi);
                        self.sticky = true;
                    } else {
                        self.value = sum;
                    }
                }
            }
            AccMode::ExactTracking => {
                self.value = wrap_to_bits(self.value + contribution, bits);
                if self.exact < lo || self.exact > hi {
                    self.events += 1;
                }
            }
        }
    }
}

/// Destination tile of `ROWS x COLS` accumulators of a given width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccTile<const ROWS: usize, const COLS: usize> {
    bits: u32,
    cells: [[AccCell; COLS]; ROWS],
}

/// 2x2 int32 destination of `smmla`.
pub type AccTile32 = AccTile<2, 2>;
/// 2x4 int16 destination of `ammla`.
pub type AccTile16 = AccTile<2, 4>;

impl<const ROWS: usize, const COLS: usize> AccTile<ROWS, COLS> {
    /// Zeroed tile with a non-standard accumulator width, for width sweeps.
    pub fn with_width(bits: u32) -> Result<Self> {
        check_acc_bits(bits)?;
        Ok(Self::zeroed(bits))
    }

    fn zeroed(bits: u32) -> Self {
        Self {
            bits,
            cells: [[AccCell::default(); COLS]; ROWS],
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &AccCell {
        &self.cells[i][j]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> i64 {
        self.cells[i][j].value
    }

    #[inline]
    pub fn sticky(&self, i: usize, j: usize) -> bool {
        self.cells[i][j].sticky
    }

    #[inline]
    pub fn events(&self, i: usize, j: usize) -> u32 {
        self.cells[i][j].events
    }

    pub fn total_events(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.events as u64).sum()
    }

    pub fn any_sticky(&self) -> bool {
        self.cells.iter().flatten().any(|c| c.sticky)
    }
}

impl AccTile<2, 2> {
    pub fn new() -> Self {
        Self::zeroed(32)
    }

    pub fn from_values(values: [[i32; 2]; 2]) -> Self {
        let mut t = Self::new();
        for (i, row) in values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t.cells[i][j] = AccCell::new(v as i64);
            }
        }
        t
    }

    pub fn values(&self) -> [[i32; 2]; 2] {
        let mut out = [[0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.cells[i][j].value as i32;
            }
        }
        out
    }
}

impl Default for AccTile<2, 2> {
    fn default() -> Self {
        Self::new()
    }
}

impl AccTile<2, 4> {
    pub fn new() -> Self {
        Self::zeroed(16)
    }

    pub fn from_values(values: [[i16; 4]; 2]) -> Self {
        let mut t = Self::new();
        for (i, row) in values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t.cells[i][j] = AccCell::new(v as i64);
            }
        }
        t
    }

    /// Element values as int16. Only meaningful at widths up to 16 bits.
    pub fn values(&self) -> [[i16; 4]; 2] {
        debug_assert!(self.bits <= 16, "{}-bit tile read as int16", self.bits);
        let mut out = [[0; 4]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.cells[i][j].value as i16;
            }
        }
        out
    }
}

impl Default for AccTile<2, 4> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn dot8(a: &OperandRegA, i: usize, mut b: impl FnMut(usize) -> i8) -> i64 {
    let mut sum = 0i32;
    for k in 0..K_DEPTH {
        sum += a.get(i, k) as i32 * b(k) as i32;
    }
    sum as i64
}

pub fn smmla_in_place(acc: &mut AccTile32, a: &OperandRegA, b: &OperandRegB8, mode: AccMode) {
    let bits = acc.bits;
    for i in 0..2 {
        for j in 0..2 {
            let d = dot8(a, i, |k| b.get(k, j));
            acc.cells[i][j].accumulate(d, bits, mode);
        }
    }
}

/// Symmetric int8 x int8 -> int32 matrix MAC.
pub fn smmla(mut acc: AccTile32, a: &OperandRegA, b: &OperandRegB8, mode: AccMode) -> AccTile32 {
    smmla_in_place(&mut acc, a, b, mode);
    acc
}

pub fn ammla_in_place(acc: &mut AccTile16, a: &OperandRegA, b: &OperandRegB4, mode: AccMode) {
    let bits = acc.bits;
    for i in 0..2 {
        for j in 0..4 {
            let d = dot8(a, i, |k| b.get(k, j));
            acc.cells[i][j].accumulate(d, bits, mode);
        }
    }
}

/// Asymmetric int8 x int4 -> int16 matrix MAC.
pub fn ammla(mut acc: AccTile16, a: &OperandRegA, b: &OperandRegB4, mode: AccMode) -> AccTile16 {
    ammla_in_place(&mut acc, a, b, mode);
    acc
}

/// Baseline: sign-extends an 8x2 window of packed int4 weights (rows
/// `8*row_block..`, columns `2*col_pair..`) into int8 lanes and runs `smmla`.
pub fn ammla_via_widening(
    acc: AccTile32,
    a: &OperandRegA,
    b4: &I4MatrixPacked,
    row_block: usize,
    col_pair: usize,
    mode: AccMode,
) -> Result<AccTile32> {
    let b = load_widened_b(b4, row_block, col_pair)?;
    Ok(smmla(acc, a, &b, mode))
}

pub(crate) fn load_widened_b(
    b4: &I4MatrixPacked,
    row_block: usize,
    col_pair: usize,
) -> Result<OperandRegB8> {
    let (r0, c0) = (8 * row_block, 2 * col_pair);
    if r0 + 8 > b4.rows() || c0 + 2 > b4.cols() {
        return Err(Error::Bounds(format!(
            "8x2 window at ({r0}, {c0}) exceeds {}x{}",
            b4.rows(),
            b4.cols()
        )));
    }
    let mut lanes = [0i8; 16];
    for j in 0..2 {
        for k in 0..8 {
            lanes[j * 8 + k] = b4.get(r0 + k, c0 + j);
        }
    }
    Ok(OperandRegB8(lanes))
}

/// True when a zero-initialised tracked `ammla` stays in range and agrees
/// with the exact 2x4 product.
pub fn tile_equivalence_check(a: &OperandRegA, b: &OperandRegB4) -> bool {
    let acc = ammla(AccTile16::new(), a, b, AccMode::ExactTracking);
    if acc.total_events() != 0 {
        return false;
    }
    (0..2).all(|i| {
        (0..4).all(|j| {
            let exact: i64 = (0..K_DEPTH)
                .map(|k| a.get(i, k) as i64 * b.get(k, j) as i64)
                .sum();
            acc.value(i, j) == exact
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reg_a_splat(v: i8) -> OperandRegA {
        OperandRegA([v; 16])
    }

    fn reg_b4_splat(v: i8) -> OperandRegB4 {
        OperandRegB4::from_cols([[v; 8]; 4]).unwrap()
    }

    #[test]
    fn wrap_and_bounds() {
        assert_eq!(acc_bounds(16), (-32768, 32767));
        assert_eq!(wrap_to_bits(-40640, 16), 24896);
        assert_eq!(wrap_to_bits(32768, 16), -32768);
        assert_eq!(wrap_to_bits(-1, 8), -1);
        assert_eq!(wrap_to_bits(1 << 31, 32), i32::MIN as i64);
    }

    #[test]
    fn smmla_zero_activations_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = OperandRegB8(rng.random());
        let acc = smmla(AccTile32::new(), &reg_a_splat(0), &b, AccMode::Wrapping);
        assert_eq!(acc.values(), [[0; 2]; 2]);
    }

    #[test]
    fn smmla_all_ones_dot_is_eight() {
        let acc = smmla(
            AccTile32::new(),
            &reg_a_splat(1),
            &OperandRegB8([1; 16]),
            AccMode::Wrapping,
        );
        assert_eq!(acc.values(), [[8; 2]; 2]);
    }

    #[test]
    fn ammla_zero_activations() {
        for mode in [
            AccMode::Wrapping,
            AccMode::SaturatingSticky,
            AccMode::ExactTracking,
        ] {
            let acc = ammla(AccTile16::new(), &reg_a_splat(0), &reg_b4_splat(-8), mode);
            assert_eq!(acc.values(), [[0; 4]; 2]);
            assert!(!acc.any_sticky());
            assert_eq!(acc.total_events(), 0);
        }
    }

    #[test]
    fn ammla_worst_case_single_step() {
        let acc = ammla(
            AccTile16::new(),
            &reg_a_splat(127),
            &reg_b4_splat(-8),
            AccMode::ExactTracking,
        );
        assert_eq!(acc.values(), [[-8128; 4]; 2]);
        assert_eq!(acc.total_events(), 0);
    }

    #[test]
    fn ammla_worst_case_chain_per_mode() {
        let a = reg_a_splat(127);
        let b = reg_b4_splat(-8);
        let run = |steps: usize, mode| {
            (0..steps).fold(AccTile16::new(), |acc, _| ammla(acc, &a, &b, mode))
        };

        for mode in [
            AccMode::Wrapping,
            AccMode::SaturatingSticky,
            AccMode::ExactTracking,
        ] {
            let acc = run(4, mode);
            assert_eq!(acc.values(), [[-32512; 4]; 2]);
            assert!(!acc.any_sticky());
            assert_eq!(acc.total_events(), 0);
        }

        assert_eq!(run(5, AccMode::Wrapping).values(), [[24896; 4]; 2]);

        let sat = run(5, AccMode::SaturatingSticky);
        assert_eq!(sat.values(), [[-32768; 4]; 2]);
        assert!((0..2).all(|i| (0..4).all(|j| sat.sticky(i, j))));

        let tracked = run(5, AccMode::ExactTracking);
        assert_eq!(tracked.values(), [[24896; 4]; 2]);
        assert!((0..2).all(|i| (0..4).all(|j| tracked.events(i, j) == 1)));
        assert_eq!(tracked.cell(0, 0).exact, -40640);
    }

    #[test]
    fn sticky_does_not_unlatch_when_exact_sum_returns() {
        let mut acc = AccTile16::new();
        for _ in 0..5 {
            acc = ammla(
                acc,
                &reg_a_splat(127),
                &reg_b4_splat(-8),
                AccMode::SaturatingSticky,
            );
        }
        // Exact sum goes back toward zero, the latched value must not move.
        for _ in 0..5 {
            acc = ammla(
                acc,
                &reg_a_splat(127),
                &reg_b4_splat(7),
                AccMode::SaturatingSticky,
            );
        }
        assert_eq!(acc.values(), [[-32768; 4]; 2]);
        assert_eq!(acc.cell(1, 3).exact, -40640 + 5 * 8 * 889);
    }

    #[test]
    fn tracking_counts_every_step_outside_range() {
        let mut acc = AccTile16::new();
        for _ in 0..7 {
            acc = ammla(
                acc,
                &reg_a_splat(127),
                &reg_b4_splat(-8),
                AccMode::ExactTracking,
            );
        }
        assert_eq!(acc.events(0, 0), 3);
    }

    #[test]
    fn positive_saturation_clamps_to_max() {
        let mut acc = AccTile16::new();
        for _ in 0..5 {
            acc = ammla(
                acc,
                &reg_a_splat(-128),
                &reg_b4_splat(-8),
                AccMode::SaturatingSticky,
            );
        }
        // 4 steps: 32768 already exits the range.
        assert_eq!(acc.values(), [[32767; 4]; 2]);
    }

    #[test]
    fn non_default_width() {
        assert!(matches!(AccTile16::with_width(7), Err(Error::Width(7))));
        assert!(matches!(AccTile16::with_width(33), Err(Error::Width(33))));
        let mut acc = AccTile16::with_width(12).unwrap();
        acc = ammla(
            acc,
            &reg_a_splat(127),
            &reg_b4_splat(-8),
            AccMode::SaturatingSticky,
        );
        assert_eq!(acc.value(0, 0), -2048);
        assert!(acc.sticky(0, 0));
    }

    #[test]
    fn widening_matches_smmla_on_widened_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = OperandRegA(rng.random());
            let vals: Vec<i8> = (0..16 * 4).map(|_| rng.random_range(-8..=7)).collect();
            let b4 = crate::matrix::pack_int4(&vals, 16, 4).unwrap();
            let widened = crate::matrix::widen_int4_to_int8(&b4, crate::matrix::Extension::Sign);
            let start = AccTile32::from_values([
                [rng.random(), rng.random()],
                [rng.random(), rng.random()],
            ]);
            for (rb, cp) in [(0, 0), (1, 1), (0, 1)] {
                let via = ammla_via_widening(start, &a, &b4, rb, cp, AccMode::Wrapping).unwrap();
                let b8 = crate::matrix::extract_reg_b8(&widened, rb, cp).unwrap();
                assert_eq!(via, smmla(start, &a, &b8, AccMode::Wrapping));
            }
        }
        let zero = crate::matrix::I4MatrixPacked::zeros(8, 2);
        let start = AccTile32::from_values([[5, -6], [7, i32::MIN]]);
        let out =
            ammla_via_widening(start, &reg_a_splat(99), &zero, 0, 0, AccMode::Wrapping).unwrap();
        assert_eq!(out.values(), start.values());
        assert!(
            ammla_via_widening(start, &reg_a_splat(1), &zero, 1, 0, AccMode::Wrapping).is_err()
        );
    }

    #[test]
    fn equivalence_check_on_random_and_overflowing_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = OperandRegA(rng.random());
            let mut cols = [[0i8; 8]; 4];
            cols.iter_mut()
                .flatten()
                .for_each(|v| *v = rng.random_range(-8..=7));
            // |dot| <= 8 * 128 * 8, always inside int16 for a single step.
            assert!(tile_equivalence_check(
                &a,
                &OperandRegB4::from_cols(cols).unwrap()
            ));
        }
    }
}
