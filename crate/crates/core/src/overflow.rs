//! Accumulator overflow measurement over conv layers lowered to GEMM.
//!
//! A layer's activations (im2col rows) and int4 weights are pushed through
//! the asymmetric GEMM in `ExactTracking` mode at a chosen accumulator
//! width. Every output element takes one accumulate step per 8-deep
//! instruction; a step counts as an overflow when the exact running sum
//! after it is outside the accumulator range.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{im2col_batch, ConvLayerSpec, FeatureMap};
use crate::error::{shape, Error, Result};
use crate::gemm::{gemm_asymmetric_with, Schedule};
use crate::isa::{check_acc_bits, AccMode, K_DEPTH};
use crate::matrix::{pack_int4, I4MatrixPacked, I8Matrix, Matrix, INT4_MAX, INT4_MIN};
use crate::tensor_file::{read_tensor_file, Tensor};

/// Widths bracketing the 16-bit design point.
pub const DEFAULT_WIDTHS: [u32; 9] = [12, 13, 14, 15, 16, 18, 20, 24, 32];

/// A named convolution layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Position of the conv layer in the network (2 for `layer2`).
    pub number: usize,
    pub conv: ConvLayerSpec,
}

/// The eight 3x3 convolutions of ResNet18 whose reduction depth is tabulated,
/// at their native spatial size (56, 28, 14, 7), stride 1, padding 1.
pub fn resnet18_layer_table() -> Vec<LayerSpec> {
    [
        (2, 64, 56),
        (4, 64, 56),
        (7, 128, 28),
        (9, 128, 28),
        (12, 256, 14),
        (14, 256, 14),
        (17, 512, 7),
        (19, 512, 7),
    ]
    .into_iter()
    .map(|(number, ch, spatial)| LayerSpec {
        name: format!("layer{number}"),
        number,
        conv: ConvLayerSpec::square(ch, ch, 3, spatial, 1, 1),
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverflowReport {
    pub layer: String,
    pub acc_width: u32,
    pub reduction_depth: usize,
    pub total_steps: u64,
    pub overflow_steps: u64,
    pub overflow_pct: f64,
}

fn pct(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

/// Counts overflowing accumulate steps of `activations x weights` at `acc_width` bits.
pub fn analyze_layer(
    layer: &str,
    activations: &I8Matrix,
    weights: &I4MatrixPacked,
    acc_width: u32,
) -> Result<OverflowReport> {
    check_acc_bits(acc_width)?;
    if activations.cols() != weights.rows() {
        return Err(shape(format!(
            "activations {}x{} do not match weights {}x{}",
            activations.rows(),
            activations.cols(),
            weights.rows(),
            weights.cols()
        )));
    }
    let out = gemm_asymmetric_with(
        activations,
        weights,
        AccMode::ExactTracking,
        acc_width,
        Schedule::Parallel,
    )?;
    let depth = activations.cols();
    let total_steps = (activations.rows() * weights.cols() * depth.div_ceil(K_DEPTH)) as u64;
    let overflow_steps = out.overflow_steps();
    Ok(OverflowReport {
        layer: layer.to_string(),
        acc_width,
        reduction_depth: depth,
        total_steps,
        overflow_steps,
        overflow_pct: pct(overflow_steps, total_steps),
    })
}

/// One report per width; `widths` must be strictly ascending.
pub fn sweep_widths(
    layer: &str,
    activations: &I8Matrix,
    weights: &I4MatrixPacked,
    widths: &[u32],
) -> Result<Vec<OverflowReport>> {
    for &w in widths {
        check_acc_bits(w)?;
    }
    if widths.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidArgument(format!(
            "widths must be strictly ascending: {widths:?}"
        )));
    }
    widths
        .iter()
        .map(|&w| analyze_layer(layer, activations, weights, w))
        .collect()
}

/// Two ways to summarise several layers at one width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverflowAggregate {
    pub acc_width: u32,
    /// Unweighted mean of per-layer percentages.
    pub per_layer_mean_pct: f64,
    /// Overflow steps over all steps, pooled across layers.
    pub step_weighted_pct: f64,
    pub total_steps: u64,
    pub overflow_steps: u64,
}

/// Summarises the reports that share `acc_width`.
pub fn aggregate(reports: &[OverflowReport], acc_width: u32) -> OverflowAggregate {
    let rows: Vec<&OverflowReport> = reports
        .iter()
        .filter(|r| r.acc_width == acc_width)
        .collect();
    let total_steps = rows.iter().map(|r| r.total_steps).sum();
    let overflow_steps = rows.iter().map(|r| r.overflow_steps).sum();
    let per_layer_mean_pct = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.overflow_pct).sum::<f64>() / rows.len() as f64
    };
    OverflowAggregate {
        acc_width,
        per_layer_mean_pct,
        step_weighted_pct: pct(overflow_steps, total_steps),
        total_steps,
        overflow_steps,
    }
}

/// Activation model in quantized units: a normal truncated to the int8 range
/// (or folded onto `[0, 127]` when `non_negative`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationModel {
    pub mean: f64,
    pub std: f64,
    pub non_negative: bool,
}

/// Weight model in int4 quantization steps, rounded and clipped to `[-8, 7]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDistSpec {
    pub activations: ActivationModel,
    pub weights: WeightModel,
    pub seed: u64,
}

impl SyntheticDistSpec {
    /// Post-ReLU-like half-normal activations and zero-mean weights.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            activations: ActivationModel {
                mean: 0.0,
                std: 80.0,
                non_negative: true,
            },
            weights: WeightModel {
                mean: 0.0,
                std: 3.0,
            },
            seed,
        }
    }

    /// Independent stream for one layer, so equally shaped layers do not
    /// receive identical tensors.
    pub fn for_layer(&self, number: usize) -> Self {
        Self {
            seed: self.seed ^ (number as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.activations.mean) && ok(self.weights.mean))
            || !(self.activations.std.is_finite() && self.activations.std > 0.0)
            || !(self.weights.std.is_finite() && self.weights.std > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid distribution parameters {self:?}"
            )));
        }
        Ok(())
    }
}

const MAX_REJECTIONS: usize = 64;

fn sample_activation<R: Rng>(rng: &mut R, dist: &Normal<f64>, non_negative: bool) -> i8 {
    let (lo, hi) = if non_negative {
        (0.0, 127.0)
    } else {
        (-128.0, 127.0)
    };
    let mut q = 0.0;
    for _ in 0..MAX_REJECTIONS {
        let mut x: f64 = dist.sample(rng);
        if non_negative {
            x = x.abs();
        }
        q = x.round();
        if (lo..=hi).contains(&q) {
            return q as i8;
        }
    }
    q.clamp(lo, hi) as i8
}

/// Deterministic lowered activations (`batch * out_h * out_w` rows) and
/// `depth x c_out` int4 weights for one layer.
pub fn generate_synthetic(
    spec: &SyntheticDistSpec,
    layer: &ConvLayerSpec,
    batch: usize,
) -> Result<(I8Matrix, I4MatrixPacked)> {
    spec.validate()?;
    layer.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let act = Normal::new(spec.activations.mean, spec.activations.std)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let wgt = Normal::new(spec.weights.mean, spec.weights.std)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let per_map = layer.c_in * layer.in_h * layer.in_w;
    let maps = (0..batch)
        .map(|_| {
            let data = (0..per_map)
                .map(|_| sample_activation(&mut rng, &act, spec.activations.non_negative))
                .collect();
            FeatureMap::new(layer.c_in, layer.in_h, layer.in_w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let activations = im2col_batch(&maps, layer)?;

    let depth = layer.reduction_depth();
    let weights: Vec<i8> = (0..depth * layer.c_out)
        .map(|_| {
            let w: f64 = wgt.sample(&mut rng);
            w.round().clamp(INT4_MIN as f64, INT4_MAX as f64) as i8
        })
        .collect();
    Ok((activations, pack_int4(&weights, depth, layer.c_out)?))
}

/// Reads a tensor file; int4 payloads come back sign-extended.
pub fn load_tensors(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor_file(path)
}

/// Number of outputs pinned at either int16 extreme. A value that legitimately
/// lands on an extreme is counted too.
pub fn sticky_scan(outputs: &Matrix<i16>) -> usize {
    outputs
        .data()
        .iter()
        .filter(|&&v| v == i16::MIN || v == i16::MAX)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gemm::gemm_asymmetric;

    fn worst_case(depth: usize) -> (I8Matrix, I4MatrixPacked) {
        let a = I8Matrix::from_fn(1, depth, |_, _| 127);
        let w = pack_int4(&vec![-8; depth], depth, 1).unwrap();
        (a, w)
    }

    #[test]
    fn table_depths() {
        let depths: Vec<usize> = resnet18_layer_table()
            .iter()
            .map(|l| l.conv.reduction_depth())
            .collect();
        assert_eq!(depths, [576, 576, 1152, 1152, 2304, 2304, 4608, 4608]);
        let t = resnet18_layer_table();
        assert_eq!(t[0].name, "layer2");
        assert_eq!(
            (t[7].conv.c_out, t[7].conv.c_in, t[7].conv.kw, t[7].conv.kh),
            (512, 512, 3, 3)
        );
    }

    #[test]
    fn zero_weights_never_overflow() {
        let a = I8Matrix::from_fn(4, 64, |_, _| 127);
        for w in [8, 16, 32] {
            let r = analyze_layer("z", &a, &I4MatrixPacked::zeros(64, 4), w).unwrap();
            assert_eq!(r.overflow_pct, 0.0);
            assert_eq!(r.total_steps, 4 * 4 * 8);
        }
    }

    #[test]
    fn worst_case_depths_at_16_bits() {
        let (a, w) = worst_case(32);
        assert_eq!(analyze_layer("wc", &a, &w, 16).unwrap().overflow_steps, 0);
        let (a, w) = worst_case(33);
        assert_eq!(analyze_layer("wc", &a, &w, 16).unwrap().overflow_steps, 1);
        let (a, w) = worst_case(40);
        let r = analyze_layer("wc", &a, &w, 16).unwrap();
        assert_eq!((r.total_steps, r.overflow_steps), (5, 1));
        assert_eq!(r.overflow_pct, 20.0);
    }

    #[test]
    fn width_errors() {
        let (a, w) = worst_case(8);
        assert!(matches!(
            analyze_layer("x", &a, &w, 7),
            Err(Error::Width(7))
        ));
        assert!(matches!(
            analyze_layer("x", &a, &w, 33),
            Err(Error::Width(33))
        ));
        assert!(sweep_widths("x", &a, &w, &[16, 12]).is_err());
        assert!(sweep_widths("x", &a, &w, &[16, 16]).is_err());
        assert!(analyze_layer("x", &a, &I4MatrixPacked::zeros(9, 1), 16).is_err());
    }

    #[test]
    fn empty_input_reports_zero() {
        let reports = sweep_widths(
            "e",
            &I8Matrix::zeros(0, 0),
            &I4MatrixPacked::zeros(0, 0),
            &[12, 16],
        )
        .unwrap();
        assert!(reports
            .iter()
            .all(|r| r.total_steps == 0 && r.overflow_pct == 0.0));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let layer = ConvLayerSpec::square(8, 12, 3, 5, 1, 1);
        let spec = SyntheticDistSpec::with_seed(42);
        let (a1, w1) = generate_synthetic(&spec, &layer, 2).unwrap();
        let (a2, w2) = generate_synthetic(&spec, &layer, 2).unwrap();
        assert_eq!((&a1, &w1), (&a2, &w2));
        assert_eq!((a1.rows(), a1.cols()), (2 * 25, 72));
        assert_eq!((w1.rows(), w1.cols()), (72, 12));
        assert!(a1.data().iter().all(|&v| v >= 0));
        let (a3, _) = generate_synthetic(&SyntheticDistSpec::with_seed(43), &layer, 2).unwrap();
        assert_ne!(a1, a3);

        let mut signed = spec;
        signed.activations.non_negative = false;
        let (a, _) = generate_synthetic(&signed, &layer, 1).unwrap();
        assert!(a.data().iter().any(|&v| v < 0));

        let mut bad = spec;
        bad.weights.std = 0.0;
        assert!(generate_synthetic(&bad, &layer, 1).is_err());
    }

    #[test]
    fn sticky_scan_counts_extremes() {
        let (a, w) = worst_case(40);
        let out = gemm_asymmetric(&a, &w, AccMode::SaturatingSticky).unwrap();
        assert_eq!(out.values.data(), &[-32768]);
        assert_eq!(sticky_scan(&out.values), 1);

        let clean = Matrix::new(1, 3, vec![0i16, -32767, 32766]).unwrap();
        assert_eq!(sticky_scan(&clean), 0);
        // Exact +32767 without any overflow still registers.
        let legit = Matrix::new(1, 1, vec![32767i16]).unwrap();
        assert_eq!(sticky_scan(&legit), 1);
    }

    #[test]
    fn aggregation_modes() {
        let mk = |layer: &str, total, ov| OverflowReport {
            layer: layer.into(),
            acc_width: 16,
            reduction_depth: 0,
            total_steps: total,
            overflow_steps: ov,
            overflow_pct: pct(ov, total),
        };
        let reports = [mk("a", 100, 1), mk("b", 900, 0)];
        let agg = aggregate(&reports, 16);
        assert_eq!(agg.per_layer_mean_pct, 0.5);
        assert_eq!(agg.step_weighted_pct, 0.1);
        assert_eq!(aggregate(&reports, 12).per_layer_mean_pct, 0.0);
    }
}
