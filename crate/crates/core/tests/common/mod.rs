//! Test-local scalar models, written without touching the library's
//! arithmetic helpers.

#![allow(dead_code)]

use asymmac::matrix::{OperandRegA, OperandRegB4, OperandRegB8};
use asymmac::{AccMode, I8Matrix, Matrix};
use rand::Rng;

/// Reduces `x` into the signed `bits`-wide range by two's-complement wrap.
pub fn wrap(x: i128, bits: u32) -> i64 {
    let modulus = 1i128 << bits;
    let half = modulus / 2;
    let r = x.rem_euclid(modulus);
    (if r >= half { r - modulus } else { r }) as i64
}

pub fn range(bits: u32) -> (i128, i128) {
    (-(1i128 << (bits - 1)), (1i128 << (bits - 1)) - 1)
}

/// One accumulator element as the scalar model sees it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cell {
    pub value: i64,
    pub exact: i128,
    pub sticky: bool,
    pub events: u32,
}

impl Cell {
    pub fn step(&mut self, contribution: i128, bits: u32, mode: AccMode) {
        let (lo, hi) = range(bits);
        self.exact += contribution;
        match mode {
            AccMode::Wrapping => self.value = wrap(self.value as i128 + contribution, bits),
            AccMode::SaturatingSticky => {
                if self.sticky {
                    return;
                }
                let s = self.value as i128 + contribution;
                if s > hi {
                    self.value = hi as i64;
                    self.sticky = true;
                } else if s < lo {
                    self.value = lo as i64;
                    self.sticky = true;
                } else {
                    self.value = s as i64;
                }
            }
            AccMode::ExactTracking => {
                self.value = wrap(self.exact, bits);
                if self.exact > hi || self.exact < lo {
                    self.events += 1;
                }
            }
        }
    }
}

/// Triple loop over plain arrays: `a` is 2 rows of 8, `b` is `N` columns of 8.
pub fn dot_tile<const N: usize>(a: &[[i8; 8]; 2], b: &[[i8; 8]; N]) -> [[i128; N]; 2] {
    let mut out = [[0i128; N]; 2];
    for i in 0..2 {
        for j in 0..N {
            for k in 0..8 {
                out[i][j] += a[i][k] as i128 * b[j][k] as i128;
            }
        }
    }
    out
}

/// Builds the packed int4 register byte by byte: column `j` lives in bytes
/// `4j..4j+4`, even rows in the low nibble.
pub fn pack_b4(cols: &[[i8; 8]; 4]) -> OperandRegB4 {
    let mut bytes = [0u8; 16];
    for (j, col) in cols.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            let nib = (v as u8) & 0x0F;
            let byte = &mut bytes[4 * j + k / 2];
            if k % 2 == 0 {
                *byte |= nib;
            } else {
                *byte |= nib << 4;
            }
        }
    }
    OperandRegB4(bytes)
}

pub fn reg_a(rows: &[[i8; 8]; 2]) -> OperandRegA {
    let mut lanes = [0i8; 16];
    for i in 0..2 {
        for k in 0..8 {
            lanes[i * 8 + k] = rows[i][k];
        }
    }
    OperandRegA(lanes)
}

pub fn reg_b8(cols: &[[i8; 8]; 2]) -> OperandRegB8 {
    let mut lanes = [0i8; 16];
    for j in 0..2 {
        for k in 0..8 {
            lanes[j * 8 + k] = cols[j][k];
        }
    }
    OperandRegB8(lanes)
}

pub fn rand_rows<R: Rng>(rng: &mut R) -> [[i8; 8]; 2] {
    let mut a = [[0i8; 8]; 2];
    for row in &mut a {
        for v in row.iter_mut() {
            *v = rng.random();
        }
    }
    a
}

pub fn rand_cols8<R: Rng>(rng: &mut R) -> [[i8; 8]; 2] {
    rand_rows(rng)
}

pub fn rand_cols4<R: Rng>(rng: &mut R) -> [[i8; 8]; 4] {
    let mut b = [[0i8; 8]; 4];
    for col in &mut b {
        for v in col.iter_mut() {
            *v = rng.random_range(-8..=7);
        }
    }
    b
}

pub fn rand_mode<R: Rng>(rng: &mut R) -> AccMode {
    match rng.random_range(0..3) {
        0 => AccMode::Wrapping,
        1 => AccMode::SaturatingSticky,
        _ => AccMode::ExactTracking,
    }
}

pub fn rand_i8_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> I8Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random())
}

pub fn rand_i4_values<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<i8> {
    (0..rows * cols).map(|_| rng.random_range(-8..=7)).collect()
}

/// Exact product by the textbook loop, then reduced step by step the way an
/// accumulator sees it: one step per 8-deep slice of the reduction.
pub fn gemm_oracle(
    a: &[i8],
    b: &[i8],
    m: usize,
    k: usize,
    n: usize,
    bits: u32,
    mode: AccMode,
) -> Vec<Cell> {
    let mut out = vec![Cell::default(); m * n];
    for i in 0..m {
        for j in 0..n {
            let cell = &mut out[i * n + j];
            for k0 in (0..k).step_by(8) {
                let mut c = 0i128;
                for kk in k0..(k0 + 8).min(k) {
                    c += a[i * k + kk] as i128 * b[kk * n + j] as i128;
                }
                cell.step(c, bits, mode);
            }
        }
    }
    out
}
