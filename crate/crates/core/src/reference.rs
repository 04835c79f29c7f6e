//! Scalar reference models used by `isa-check` to cross-validate the
//! instruction kernels. Plain 64-bit triple loops, no shared code with `isa`.

use rand::Rng;

use crate::isa::{ammla, smmla, AccMode, AccTile16, AccTile32};
use crate::matrix::{OperandRegA, OperandRegB4, OperandRegB8};

fn reduce_mod(x: i64, bits: u32) -> i64 {
    let m = 1i64 << bits;
    let r = x.rem_euclid(m);
    if r >= m / 2 {
        r - m
    } else {
        r
    }
}

/// Wrapping 2xN tile update: `acc + a * b` reduced modulo `2^bits`.
pub fn mmla_wrapping<const N: usize>(
    acc: [[i64; N]; 2],
    a: &[[i8; 8]; 2],
    b: &[[i8; N]; 8],
    bits: u32,
) -> [[i64; N]; 2] {
    let mut out = acc;
    for i in 0..2 {
        for j in 0..N {
            let mut sum = acc[i][j];
            for k in 0..8 {
                sum += a[i][k] as i64 * b[k][j] as i64;
            }
            out[i][j] = reduce_mod(sum, bits);
        }
    }
    out
}

/// Outcome of an oracle comparison run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckSummary {
    pub smmla_cases: u64,
    pub ammla_cases: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<String>,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.mismatches += 1;
            if self.first_mismatch.is_none() {
                self.first_mismatch = Some(what());
            }
        }
    }
}

fn a_rows(a: &OperandRegA) -> [[i8; 8]; 2] {
    let mut rows = [[0; 8]; 2];
    for (i, row) in rows.iter_mut().enumerate() {
        row.copy_from_slice(&a.0[i * 8..i * 8 + 8]);
    }
    rows
}

/// Runs `samples` random operand triples through both instructions in
/// wrapping mode, plus every single-nonzero-lane `ammla` case, and compares
/// against the scalar model.
pub fn check_wrapping<R: Rng>(rng: &mut R, samples: u64) -> CheckSummary {
    let mut summary = CheckSummary::default();

    for _ in 0..samples {
        let a = OperandRegA(rng.random());
        let rows = a_rows(&a);

        let b8: [i8; 16] = rng.random();
        let mut b8_kj = [[0i8; 2]; 8];
        for (k, row) in b8_kj.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = b8[j * 8 + k];
            }
        }
        let acc32: [[i32; 2]; 2] = rng.random();
        let got = smmla(
            AccTile32::from_values(acc32),
            &a,
            &OperandRegB8(b8),
            AccMode::Wrapping,
        )
        .values();
        let want = mmla_wrapping(acc32.map(|r| r.map(i64::from)), &rows, &b8_kj, 32);
        summary.smmla_cases += 1;
        summary.record(got.map(|r| r.map(i64::from)) == want, || {
            format!(
                "smmla a={:?} b={b8:?} acc={acc32:?}: got {got:?} want {want:?}",
                a.0
            )
        });

        let mut w = [[0i8; 4]; 8];
        w.iter_mut()
            .flatten()
            .for_each(|v| *v = rng.random_range(-8..=7));
        let acc16: [[i16; 4]; 2] = rng.random();
        summary.ammla_cases += 1;
        compare_ammla(&mut summary, &a, &w, acc16);
    }

    // One nonzero lane in either operand, across every value it can take.
    for lane in 0..16 {
        for v in i8::MIN..=i8::MAX {
            let mut a = OperandRegA([0; 16]);
            a.0[lane] = v;
            summary.ammla_cases += 1;
            compare_ammla(&mut summary, &a, &[[-8; 4]; 8], [[0; 4]; 2]);
            summary.ammla_cases += 1;
            compare_ammla(&mut summary, &a, &[[7; 4]; 8], [[i16::MAX; 4]; 2]);
        }
    }
    for k in 0..8 {
        for j in 0..4 {
            for v in -8..=7 {
                let mut w = [[0i8; 4]; 8];
                w[k][j] = v;
                summary.ammla_cases += 1;
                compare_ammla(&mut summary, &OperandRegA([127; 16]), &w, [[0; 4]; 2]);
                summary.ammla_cases += 1;
                compare_ammla(
                    &mut summary,
                    &OperandRegA([-128; 16]),
                    &w,
                    [[i16::MIN; 4]; 2],
                );
            }
        }
    }
    summary
}

fn compare_ammla(
    summary: &mut CheckSummary,
    a: &OperandRegA,
    w: &[[i8; 4]; 8],
    acc16: [[i16; 4]; 2],
) {
    let mut cols = [[0i8; 8]; 4];
    for (k, row) in w.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            cols[j][k] = v;
        }
    }
    let b = OperandRegB4::from_cols(cols).expect("weights drawn in int4 range");
    let got = ammla(AccTile16::from_values(acc16), a, &b, AccMode::Wrapping).values();
    let want = mmla_wrapping(acc16.map(|r| r.map(i64::from)), &a_rows(a), w, 16);
    summary.record(got.map(|r| r.map(i64::from)) == want, || {
        format!(
            "ammla a={:?} w={w:?} acc={acc16:?}: got {got:?} want {want:?}",
            a.0
        )
    });
}
