//! Fixed-width integer matrix containers, packed int4 storage and the
//! 128-bit operand register layouts consumed by the matrix-MAC instructions.
//!
//! Packed int4 layout: element `(r, c)` has linear index `r * cols + c` and
//! lives in byte `index / 2`, in the low nibble when the index is even. When
//! the element count is odd the final high nibble is zero.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

pub const INT4_MIN: i8 = -8;
pub const INT4_MAX: i8 = 7;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Signed 8-bit activations (or baseline 8-bit weights).
pub type I8Matrix = Matrix<i8>;

impl<T: Copy + Default> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} elements do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl FnMut(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Zero-pads (with `T::default()`) on the bottom and right up to `rows x cols`.
    pub fn padded(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows < self.rows || cols < self.cols {
            return Err(shape(format!(
                "cannot pad {}x{} down to {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        if rows == self.rows && cols == self.cols {
            return Ok(self.clone());
        }
        Ok(Self::from_fn(rows, cols, |r, c| {
            if r < self.rows && c < self.cols {
                self.get(r, c)
            } else {
                T::default()
            }
        }))
    }

    /// Top-left `rows x cols` sub-matrix.
    pub fn cropped(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows > self.rows || cols > self.cols {
            return Err(shape(format!(
                "cannot crop {}x{} to {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(Self::from_fn(rows, cols, |r, c| self.get(r, c)))
    }
}

impl<T: Serialize> Serialize for Matrix<T>
where
    T: Copy + Default,
{
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Matrix", 3)?;
        st.serialize_field("rows", &self.rows())?;
        st.serialize_field("cols", &self.cols())?;
        st.serialize_field("data", self.data())?;
        st.end()
    }
}

impl<'de, T> Deserialize<'de> for Matrix<T>
where
    T: Deserialize<'de> + Copy + Default,
{
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw<T> {
            rows: usize,
            cols: usize,
            data: Vec<T>,
        }
        let raw = Raw::<T>::deserialize(d)?;
        Matrix::new(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

/// Smallest multiple of `align` that is `>= n`.
#[inline]
pub fn round_up(n: usize, align: usize) -> usize {
    n.div_ceil(align) * align
}

#[inline]
fn decode_nibble(nibble: u8) -> i8 {
    // Shift the nibble into the top of the byte, then arithmetic-shift back.
    ((nibble << 4) as i8) >> 4
}

#[inline]
fn encode_nibble(v: i8) -> u8 {
    (v as u8) & 0x0F
}

/// Matrix of signed 4-bit elements, two per byte.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct I4MatrixPacked {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl I4MatrixPacked {
    /// Wraps already-packed bytes, checking the length and the zero pad nibble.
    pub fn from_packed(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        let n = rows * cols;
        if data.len() != n.div_ceil(2) {
            return Err(shape(format!(
                "{} bytes cannot hold {rows}x{cols} packed int4 elements",
                data.len()
            )));
        }
        if n % 2 == 1 && data[n / 2] & 0xF0 != 0 {
            return Err(shape(
                "final pad nibble of an odd-length int4 matrix must be zero",
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; (rows * cols).div_ceil(2)],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        let idx = r * self.cols + c;
        let byte = self.data[idx / 2];
        decode_nibble(if idx.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        })
    }

    pub fn padded(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows < self.rows || cols < self.cols {
            return Err(shape(format!(
                "cannot pad {}x{} down to {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        if rows == self.rows && cols == self.cols {
            return Ok(self.clone());
        }
        let values: Vec<i8> = (0..rows)
            .flat_map(|r| {
                (0..cols).map(move |c| {
                    if r < self.rows && c < self.cols {
                        self.get(r, c)
                    } else {
                        0
                    }
                })
            })
            .collect();
        pack_int4(&values, rows, cols)
    }
}

/// Packs row-major values in [-8, 7] into nibbles.
pub fn pack_int4(values: &[i8], rows: usize, cols: usize) -> Result<I4MatrixPacked> {
    if values.len() != rows * cols {
        return Err(shape(format!(
            "{} values do not fill a {rows}x{cols} matrix",
            values.len()
        )));
    }
    if let Some((index, &v)) = values
        .iter()
        .enumerate()
        .find(|(_, &v)| !(INT4_MIN..=INT4_MAX).contains(&v))
    {
        return Err(Error::Range {
            index,
            value: v as i64,
            min: INT4_MIN as i64,
            max: INT4_MAX as i64,
        });
    }
    let data = values
        .chunks(2)
        .map(|pair| {
            let lo = encode_nibble(pair[0]);
            let hi = pair.get(1).map_or(0, |&v| encode_nibble(v));
            lo | (hi << 4)
        })
        .collect();
    Ok(I4MatrixPacked { rows, cols, data })
}

/// Sign-extending inverse of [`pack_int4`].
pub fn unpack_int4(m: &I4MatrixPacked) -> Vec<i8> {
    let n = m.rows * m.cols;
    let mut out = Vec::with_capacity(n);
    for &byte in &m.data {
        out.push(decode_nibble(byte & 0x0F));
        out.push(decode_nibble(byte >> 4));
    }
    out.truncate(n);
    out
}

/// How a nibble fills the upper half of an 8-bit lane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Extension {
    #[default]
    Sign,
    Zero,
}

/// Expands every int4 element into its own int8 lane.
pub fn widen_int4_to_int8(m: &I4MatrixPacked, ext: Extension) -> I8Matrix {
    let values = unpack_int4(m);
    let data = match ext {
        Extension::Sign => values,
        Extension::Zero => values.into_iter().map(|v| encode_nibble(v) as i8).collect(),
    };
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

/// Repacks an int8 matrix whose elements all fit in [-8, 7].
pub fn narrow_int8_to_int4(m: &I8Matrix) -> Result<I4MatrixPacked> {
    pack_int4(m.data(), m.rows(), m.cols())
}

/// First operand: a 2x8 block of activations, row-major, 16 lanes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OperandRegA(pub [i8; 16]);

impl OperandRegA {
    /// Element at row `i` (0..2), reduction index `k` (0..8).
    #[inline]
    pub fn get(&self, i: usize, k: usize) -> i8 {
        self.0[i * 8 + k]
    }

    pub fn from_rows(rows: [[i8; 8]; 2]) -> Self {
        let mut lanes = [0i8; 16];
        lanes[..8].copy_from_slice(&rows[0]);
        lanes[8..].copy_from_slice(&rows[1]);
        Self(lanes)
    }
}

/// Symmetric second operand: an 8x2 block of int8 weights, column-major.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OperandRegB8(pub [i8; 16]);

impl OperandRegB8 {
    /// Element at reduction index `k` (0..8), column `j` (0..2).
    #[inline]
    pub fn get(&self, k: usize, j: usize) -> i8 {
        self.0[j * 8 + k]
    }

    pub fn from_cols(cols: [[i8; 8]; 2]) -> Self {
        let mut lanes = [0i8; 16];
        lanes[..8].copy_from_slice(&cols[0]);
        lanes[8..].copy_from_slice(&cols[1]);
        Self(lanes)
    }
}

/// Asymmetric second operand: an 8x4 block of int4 weights in 16 bytes.
///
/// Column `j` occupies bytes `4j..4j+4`; row `k` of that column is in byte
/// `4j + k/2`, low nibble for even `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OperandRegB4(pub [u8; 16]);

impl OperandRegB4 {
    #[inline]
    pub fn get(&self, k: usize, j: usize) -> i8 {
        let byte = self.0[j * 4 + k / 2];
        decode_nibble(if k.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        })
    }

    /// Builds the register from an 8x4 block given as `cols[j][k]`.
    pub fn from_cols(cols: [[i8; 8]; 4]) -> Result<Self> {
        let mut bytes = [0u8; 16];
        for (j, col) in cols.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                if !(INT4_MIN..=INT4_MAX).contains(&v) {
                    return Err(Error::Range {
                        index: j * 8 + k,
                        value: v as i64,
                        min: INT4_MIN as i64,
                        max: INT4_MAX as i64,
                    });
                }
                bytes[j * 4 + k / 2] |= encode_nibble(v) << (4 * (k % 2));
            }
        }
        Ok(Self(bytes))
    }

    /// Lower (`half == 0`) or upper pair of columns as int8 lanes: the layout
    /// the widening baseline would have to build.
    pub fn widen_half(&self, half: usize) -> OperandRegB8 {
        let mut lanes = [0i8; 16];
        for j in 0..2 {
            for k in 0..8 {
                lanes[j * 8 + k] = self.get(k, 2 * half + j);
            }
        }
        OperandRegB8(lanes)
    }
}

fn check_window(
    what: &str,
    rows: usize,
    cols: usize,
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    if r0 + h > rows || c0 + w > cols {
        return Err(Error::Bounds(format!(
            "{what} window rows {r0}..{} cols {c0}..{} exceeds {rows}x{cols}",
            r0 + h,
            c0 + w
        )));
    }
    Ok(())
}

/// Rows `2*row_pair..+2`, columns `8*col_block..+8`.
pub fn extract_reg_a(m: &I8Matrix, row_pair: usize, col_block: usize) -> Result<OperandRegA> {
    let (r0, c0) = (2 * row_pair, 8 * col_block);
    check_window("A", m.rows, m.cols, r0, c0, 2, 8)?;
    let mut lanes = [0i8; 16];
    for i in 0..2 {
        let start = (r0 + i) * m.cols + c0;
        lanes[i * 8..i * 8 + 8].copy_from_slice(&m.data[start..start + 8]);
    }
    Ok(OperandRegA(lanes))
}

/// Rows `8*row_block..+8`, columns `2*col_pair..+2`.
pub fn extract_reg_b8(m: &I8Matrix, row_block: usize, col_pair: usize) -> Result<OperandRegB8> {
    let (r0, c0) = (8 * row_block, 2 * col_pair);
    check_window("B8", m.rows, m.cols, r0, c0, 8, 2)?;
    let mut lanes = [0i8; 16];
    for j in 0..2 {
        for k in 0..8 {
            lanes[j * 8 + k] = m.get(r0 + k, c0 + j);
        }
    }
    Ok(OperandRegB8(lanes))
}

/// Rows `8*row_block..+8`, columns `4*col_block..+4`.
pub fn extract_reg_b4(
    m: &I4MatrixPacked,
    row_block: usize,
    col_block: usize,
) -> Result<OperandRegB4> {
    let (r0, c0) = (8 * row_block, 4 * col_block);
    check_window("B4", m.rows, m.cols, r0, c0, 8, 4)?;
    let mut bytes = [0u8; 16];
    for j in 0..4 {
        for k in 0..8 {
            bytes[j * 4 + k / 2] |= encode_nibble(m.get(r0 + k, c0 + j)) << (4 * (k % 2));
        }
    }
    Ok(OperandRegB4(bytes))
}

/// Writes a 2x8 A register back into its window; inverse of [`extract_reg_a`].
pub fn scatter_reg_a(
    m: &mut I8Matrix,
    reg: &OperandRegA,
    row_pair: usize,
    col_block: usize,
) -> Result<()> {
    let (r0, c0) = (2 * row_pair, 8 * col_block);
    check_window("A", m.rows, m.cols, r0, c0, 2, 8)?;
    for i in 0..2 {
        for k in 0..8 {
            m.set(r0 + i, c0 + k, reg.get(i, k));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_zero_case() {
        let m = pack_int4(&[0, 0, 0, 0], 2, 2).unwrap();
        assert_eq!(m.bytes(), &[0x00, 0x00]);
    }

    #[test]
    fn pack_extremes_into_one_byte() {
        let m = pack_int4(&[-8, 7], 1, 2).unwrap();
        assert_eq!(m.bytes(), &[0x78]);
    }

    #[test]
    fn pack_odd_length_zeroes_last_high_nibble() {
        let m = pack_int4(&[1, 2, 3], 1, 3).unwrap();
        assert_eq!(m.bytes(), &[0x21, 0x03]);
    }

    #[test]
    fn pack_rejects_out_of_range_and_bad_length() {
        assert!(matches!(
            pack_int4(&[0, 8], 1, 2),
            Err(Error::Range {
                index: 1,
                value: 8,
                ..
            })
        ));
        assert!(matches!(pack_int4(&[-9], 1, 1), Err(Error::Range { .. })));
        assert!(matches!(pack_int4(&[0, 0, 0], 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn unpack_sign_extends() {
        let m = I4MatrixPacked::from_packed(1, 2, vec![0xF8]).unwrap();
        assert_eq!(unpack_int4(&m), vec![-8, -1]);
        let z = I4MatrixPacked::from_packed(1, 1, vec![0x00]).unwrap();
        assert_eq!(unpack_int4(&z), vec![0]);
    }

    #[test]
    fn from_packed_rejects_dirty_pad_nibble() {
        assert!(I4MatrixPacked::from_packed(1, 1, vec![0x10]).is_err());
        assert!(I4MatrixPacked::from_packed(1, 2, vec![0x10, 0x00]).is_err());
    }

    #[test]
    fn exhaustive_roundtrip_over_nibble_pairs() {
        for a in INT4_MIN..=INT4_MAX {
            for b in INT4_MIN..=INT4_MAX {
                let m = pack_int4(&[a, b], 1, 2).unwrap();
                assert_eq!(unpack_int4(&m), vec![a, b]);
                assert_eq!((m.get(0, 0), m.get(0, 1)), (a, b));
            }
        }
    }

    #[test]
    fn widen_preserves_signed_values() {
        let m = pack_int4(&[-8, 7], 1, 2).unwrap();
        assert_eq!(widen_int4_to_int8(&m, Extension::Sign).data(), &[-8, 7]);
        let z = I4MatrixPacked::zeros(8, 4);
        assert_eq!(
            widen_int4_to_int8(&z, Extension::Sign),
            I8Matrix::zeros(8, 4)
        );
    }

    #[test]
    fn zero_extension_reads_nibbles_unsigned() {
        let m = pack_int4(&[-8, -1, 3], 1, 3).unwrap();
        assert_eq!(widen_int4_to_int8(&m, Extension::Zero).data(), &[8, 15, 3]);
    }

    fn patterned(rows: usize, cols: usize) -> I8Matrix {
        I8Matrix::from_fn(rows, cols, |r, c| (r * cols + c) as i8)
    }

    #[test]
    fn reg_a_windows() {
        let m = patterned(4, 16);
        let a = extract_reg_a(&m, 0, 0).unwrap();
        let expect: Vec<i8> = (0..8).chain(16..24).collect();
        assert_eq!(a.0.to_vec(), expect);

        let a = extract_reg_a(&m, 1, 1).unwrap();
        let expect: Vec<i8> = (40..48).chain(56..64).collect();
        assert_eq!(a.0.to_vec(), expect);

        assert!(matches!(extract_reg_a(&m, 2, 0), Err(Error::Bounds(_))));
        assert!(matches!(extract_reg_a(&m, 0, 2), Err(Error::Bounds(_))));
    }

    fn patterned_i4(rows: usize, cols: usize) -> I4MatrixPacked {
        let values: Vec<i8> = (0..rows * cols).map(|i| ((i % 16) as i8) - 8).collect();
        pack_int4(&values, rows, cols).unwrap()
    }

    #[test]
    fn reg_b4_windows() {
        let m = patterned_i4(16, 8);
        let b = extract_reg_b4(&m, 0, 0).unwrap();
        for k in 0..8 {
            for j in 0..4 {
                assert_eq!(b.get(k, j), m.get(k, j));
            }
        }
        let b = extract_reg_b4(&m, 1, 1).unwrap();
        for k in 0..8 {
            for j in 0..4 {
                assert_eq!(b.get(k, j), m.get(8 + k, 4 + j));
            }
        }
        assert!(matches!(extract_reg_b4(&m, 2, 0), Err(Error::Bounds(_))));
        assert!(matches!(extract_reg_b4(&m, 0, 2), Err(Error::Bounds(_))));
    }

    #[test]
    fn reg_b4_column_major_byte_layout() {
        // Column 0 = 0..8 → bytes 0x10, 0x32, 0x54, 0x76.
        let mut cols = [[0i8; 8]; 4];
        cols[0] = [0, 1, 2, 3, 4, 5, 6, 7];
        cols[3] = [-1; 8];
        let reg = OperandRegB4::from_cols(cols).unwrap();
        assert_eq!(&reg.0[..4], &[0x10, 0x32, 0x54, 0x76]);
        assert_eq!(&reg.0[12..], &[0xFF; 4]);
    }

    #[test]
    fn reg_b8_window_is_column_major() {
        let m = patterned(16, 4);
        let b = extract_reg_b8(&m, 1, 1).unwrap();
        for k in 0..8 {
            for j in 0..2 {
                assert_eq!(b.get(k, j), m.get(8 + k, 2 + j));
                assert_eq!(b.0[j * 8 + k], m.get(8 + k, 2 + j));
            }
        }
        assert!(extract_reg_b8(&m, 2, 0).is_err());
    }

    #[test]
    fn padding_adds_zeros_and_crop_inverts() {
        let m = patterned(3, 5);
        let p = m.padded(4, 8).unwrap();
        assert_eq!(p.get(3, 7), 0);
        assert_eq!(p.get(2, 4), m.get(2, 4));
        assert_eq!(p.cropped(3, 5).unwrap(), m);
        assert!(m.padded(2, 5).is_err());

        let q = patterned_i4(3, 3).padded(8, 4).unwrap();
        assert_eq!(q.get(2, 2), patterned_i4(3, 3).get(2, 2));
        assert_eq!(q.get(7, 3), 0);
    }

    proptest! {
        #[test]
        fn roundtrip_any_shape(rows in 0usize..=64, cols in 0usize..=64, seed in any::<u64>()) {
            let mut s = seed;
            let values: Vec<i8> = (0..rows * cols)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 60) as i8) - 8
                })
                .collect();
            let m = pack_int4(&values, rows, cols).unwrap();
            prop_assert_eq!(unpack_int4(&m), values.clone());
            let repacked = narrow_int8_to_int4(&widen_int4_to_int8(&m, Extension::Sign)).unwrap();
            prop_assert_eq!(repacked, m);
        }

        #[test]
        fn extract_then_scatter_reproduces_window(
            lanes in proptest::array::uniform16(any::<i8>()),
            row_pair in 0usize..3,
            col_block in 0usize..2,
        ) {
            let src = I8Matrix::from_fn(6, 16, |r, c| (r as i8).wrapping_mul(31).wrapping_add(c as i8));
            let mut m = src.clone();
            scatter_reg_a(&mut m, &OperandRegA(lanes), row_pair, col_block).unwrap();
            prop_assert_eq!(extract_reg_a(&m, row_pair, col_block).unwrap(), OperandRegA(lanes));
            let back = extract_reg_a(&src, row_pair, col_block).unwrap();
            scatter_reg_a(&mut m, &back, row_pair, col_block).unwrap();
            prop_assert_eq!(m, src);
        }
    }
}
