use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use asymmac::gemm::{gemm_asymmetric, gemm_symmetric, plan_counters};
use asymmac::isa::{AMMLA_MACS, SMMLA_MACS};
use asymmac::matrix::{pack_int4, I4MatrixPacked, I8Matrix};
use asymmac::overflow::{
    aggregate, generate_synthetic, load_tensors, resnet18_layer_table, sweep_widths,
    ActivationModel, LayerSpec, OverflowAggregate, OverflowReport, SyntheticDistSpec, WeightModel,
    DEFAULT_WIDTHS,
};
use asymmac::reference::check_wrapping;
use asymmac::systolic::{
    analytic_cycles, simulate_traced, throughput_compare, PeMode, SaConfig, WeightOperand,
};
use asymmac::tensor_file::{read_tensor_file, Tensor, TensorData};
use asymmac::AccMode;

use crate::output::{emit, render, to_csv, to_json};
use crate::{Command, DTypeArg, Failure, Format};

pub fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::IsaCheck { samples, seed } => isa_check(samples, seed),
        Command::Throughput {
            m,
            k,
            n,
            rows,
            cols,
            format,
            out,
        } => throughput(m, k, n, rows, cols, format, out.as_deref()),
        Command::Overflow {
            layers,
            widths,
            seed,
            batch,
            spatial,
            c_out,
            act_std,
            weight_std,
            signed_activations,
            activations,
            weights,
            format,
            out,
        } => {
            let dist = SyntheticDistSpec {
                activations: ActivationModel {
                    mean: 0.0,
                    std: act_std,
                    non_negative: !signed_activations,
                },
                weights: WeightModel {
                    mean: 0.0,
                    std: weight_std,
                },
                seed,
            };
            let args = OverflowArgs {
                layers,
                widths: widths.unwrap_or_else(|| DEFAULT_WIDTHS.to_vec()),
                batch,
                spatial,
                c_out,
                dist,
                tensors: activations.zip(weights),
            };
            overflow(args, format, out.as_deref())
        }
        Command::SaSim {
            m,
            k,
            n,
            rows,
            cols,
            pe_mode,
            mode,
            seed,
            activity_csv,
            out,
        } => {
            let cfg = SaConfig::new(rows, cols, pe_mode.into(), mode.into())?;
            sa_sim(m, k, n, cfg, seed, activity_csv.as_deref(), out.as_deref())
        }
        Command::Pack {
            unpack,
            input,
            dtype,
            dims,
            out,
        } => {
            if unpack {
                unpack_file(&input, out.as_deref())
            } else {
                let dtype =
                    dtype.ok_or_else(|| Failure::Usage("--dtype is required to pack".into()))?;
                let dims =
                    dims.ok_or_else(|| Failure::Usage("--dims is required to pack".into()))?;
                let out = out.ok_or_else(|| Failure::Usage("--out is required to pack".into()))?;
                pack_file(&input, dtype, dims, &out)
            }
        }
    }
}

fn isa_check(samples: u64, seed: u64) -> Result<(), Failure> {
    if samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let summary = check_wrapping(&mut ChaCha8Rng::seed_from_u64(seed), samples);
    println!(
        "isa-check seed={seed}: smmla cases={} ammla cases={} mismatches={}",
        summary.smmla_cases, summary.ammla_cases, summary.mismatches
    );
    match summary.first_mismatch {
        None => Ok(()),
        Some(first) => Err(Failure::Verification(first)),
    }
}

#[derive(Serialize)]
struct ThroughputRow {
    m: usize,
    k: usize,
    n: usize,
    sym_instructions: u64,
    asym_instructions: u64,
    widening_instructions: u64,
    sym_loads: u64,
    asym_loads: u64,
    gemm_ratio: f64,
    sa_rows: usize,
    sa_cols: usize,
    sa_sym_cycles: u64,
    sa_asym_cycles: u64,
    sa_sym_macs_per_cycle: f64,
    sa_asym_macs_per_cycle: f64,
    sa_ratio_with_fill_drain: f64,
    sa_ratio_steady: Option<f64>,
}

fn throughput(
    m: usize,
    k: usize,
    n: usize,
    rows: usize,
    cols: usize,
    format: Format,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Failure::Usage(format!(
            "dimensions must be positive, got {m}x{k}x{n}"
        )));
    }
    SaConfig::new(rows, cols, PeMode::Symmetric, AccMode::Wrapping)?;
    let sym = plan_counters(m, k, n, 2, SMMLA_MACS);
    let asym = plan_counters(m, k, n, 4, AMMLA_MACS);
    let sa = throughput_compare(m, k, n, rows, cols)?;
    let row = ThroughputRow {
        m,
        k,
        n,
        sym_instructions: sym.mac_instructions,
        asym_instructions: asym.mac_instructions,
        // The widening path issues the symmetric instruction on sign-extended weights.
        widening_instructions: sym.mac_instructions,
        sym_loads: sym.load_ops,
        asym_loads: asym.load_ops,
        gemm_ratio: sym.mac_instructions as f64 / asym.mac_instructions as f64,
        sa_rows: rows,
        sa_cols: cols,
        sa_sym_cycles: sa.symmetric.cycles,
        sa_asym_cycles: sa.asymmetric.cycles,
        sa_sym_macs_per_cycle: sa.symmetric.macs_per_cycle,
        sa_asym_macs_per_cycle: sa.asymmetric.macs_per_cycle,
        sa_ratio_with_fill_drain: sa.ratio_with_fill_drain,
        sa_ratio_steady: sa.ratio_steady,
    };
    emit(out, &render(format, std::slice::from_ref(&row), &row)?)
}

struct OverflowArgs {
    layers: String,
    widths: Vec<u32>,
    batch: usize,
    spatial: Option<usize>,
    c_out: Option<usize>,
    dist: SyntheticDistSpec,
    tensors: Option<(PathBuf, PathBuf)>,
}

#[derive(Serialize)]
struct OverflowDoc<'a> {
    counting: &'static str,
    reports: &'a [OverflowReport],
    aggregates: Vec<OverflowAggregate>,
}

fn select_layers(filter: &str) -> Result<Vec<LayerSpec>, Failure> {
    let table = resnet18_layer_table();
    let filter = filter.trim();
    if filter.is_empty() {
        return Err(Failure::Usage(
            "--layers must name at least one layer".into(),
        ));
    }
    if filter == "all" {
        return Ok(table);
    }
    filter
        .split(',')
        .map(|name| {
            let name = name.trim();
            table
                .iter()
                .find(|l| l.name == name)
                .cloned()
                .ok_or_else(|| Failure::Usage(format!("unknown layer {name:?}")))
        })
        .collect()
}

fn overflow(args: OverflowArgs, format: Format, out: Option<&Path>) -> Result<(), Failure> {
    if args.widths.is_empty() {
        return Err(Failure::Usage(
            "--widths must list at least one width".into(),
        ));
    }
    if args.batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    args.dist.validate()?;

    let mut reports = Vec::new();
    if let Some((act_path, wgt_path)) = &args.tensors {
        let label = match args.layers.trim() {
            "" => {
                return Err(Failure::Usage(
                    "--layers must name at least one layer".into(),
                ))
            }
            "all" => "custom",
            name => name,
        };
        let activations = load_tensors(act_path)?.to_i8_matrix()?;
        let weights = load_tensors(wgt_path)?.to_i4_matrix()?;
        reports.extend(sweep_widths(label, &activations, &weights, &args.widths)?);
    } else {
        let mut layers = select_layers(&args.layers)?;
        for layer in &mut layers {
            if let Some(s) = args.spatial {
                layer.conv = layer.conv.with_spatial(s, s);
            }
            if let Some(c) = args.c_out {
                layer.conv = layer.conv.with_c_out(c);
            }
            layer.conv.validate()?;
        }
        // Validate widths before the first (possibly long) layer runs.
        sweep_widths(
            "check",
            &I8Matrix::zeros(0, 0),
            &I4MatrixPacked::zeros(0, 0),
            &args.widths,
        )?;
        for layer in &layers {
            let (activations, weights) =
                generate_synthetic(&args.dist.for_layer(layer.number), &layer.conv, args.batch)?;
            reports.extend(sweep_widths(
                &layer.name,
                &activations,
                &weights,
                &args.widths,
            )?);
        }
    }

    let aggregates: Vec<OverflowAggregate> = args
        .widths
        .iter()
        .map(|&w| aggregate(&reports, w))
        .collect();
    for agg in &aggregates {
        eprintln!(
            "width {:>2}: per-layer mean {:.6}%  step-weighted {:.6}%",
            agg.acc_width, agg.per_layer_mean_pct, agg.step_weighted_pct
        );
    }
    let doc = OverflowDoc {
        counting: "one accumulate step per output element per 8-deep instruction",
        reports: &reports,
        aggregates,
    };
    emit(out, &render(format, &reports, &doc)?)
}

#[derive(Serialize)]
struct SaSummary {
    m: usize,
    k: usize,
    n: usize,
    config: SaConfig,
    cycles: u64,
    analytic_cycles: u64,
    passes: u64,
    macs_performed: u64,
    macs_per_cycle: f64,
    transfers: u64,
    max_hop: usize,
    matches_gemm: bool,
}

fn random_i8(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> I8Matrix {
    I8Matrix::from_fn(rows, cols, |_, _| rng.random())
}

fn sa_sim(
    m: usize,
    k: usize,
    n: usize,
    cfg: SaConfig,
    seed: u64,
    activity_csv: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Failure::Usage(format!(
            "dimensions must be positive, got {m}x{k}x{n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_i8(&mut rng, m, k);
    let (trace, reference) = match cfg.pe_mode {
        PeMode::Symmetric => {
            let b = random_i8(&mut rng, k, n);
            let trace = simulate_traced(&a, WeightOperand::Int8(&b), &cfg, activity_csv.is_some())?;
            let g = gemm_symmetric(&a, &b, cfg.acc_mode)?;
            (
                trace,
                (g.values.map(i64::from), g.sticky, g.overflow_events),
            )
        }
        PeMode::AsymmetricDual => {
            let vals: Vec<i8> = (0..k * n).map(|_| rng.random_range(-8..=7)).collect();
            let b = pack_int4(&vals, k, n)?;
            let trace = simulate_traced(&a, WeightOperand::Int4(&b), &cfg, activity_csv.is_some())?;
            let g = gemm_asymmetric(&a, &b, cfg.acc_mode)?;
            (
                trace,
                (g.values.map(i64::from), g.sticky, g.overflow_events),
            )
        }
    };
    let matches_gemm = trace.values == reference.0
        && trace.sticky == reference.1
        && trace.overflow_events == reference.2;
    let summary = SaSummary {
        m,
        k,
        n,
        config: cfg,
        cycles: trace.cycles,
        analytic_cycles: analytic_cycles(m, k, n, &cfg),
        passes: trace.passes,
        macs_performed: trace.macs_performed,
        macs_per_cycle: trace.macs_per_cycle(),
        transfers: trace.transfers,
        max_hop: trace.max_hop,
        matches_gemm,
    };

    if let (Some(path), Some(activity)) = (activity_csv, trace.activity.as_ref()) {
        #[derive(Serialize)]
        struct Row {
            cycle: usize,
            active_pes: u32,
            macs: u64,
        }
        let lanes = cfg.pe_mode.lanes() as u64;
        let rows: Vec<Row> = activity
            .iter()
            .enumerate()
            .map(|(cycle, &active_pes)| Row {
                cycle,
                active_pes,
                macs: active_pes as u64 * lanes,
            })
            .collect();
        emit(Some(path), &to_csv(&rows)?)?;
    }
    emit(out, &to_json(&summary)?)?;

    if !matches_gemm {
        return Err(Failure::Verification(
            "systolic output differs from the GEMM kernel".into(),
        ));
    }
    if summary.cycles != summary.analytic_cycles {
        return Err(Failure::Verification(format!(
            "simulated {} cycles, analytic model predicts {}",
            summary.cycles, summary.analytic_cycles
        )));
    }
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<i64>, Failure> {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<i64>()
                .map_err(|e| Failure::Usage(format!("bad integer {t:?}: {e}")))
        })
        .collect()
}

fn narrow<T: TryFrom<i64>>(values: &[i64]) -> Result<Vec<T>, Failure> {
    values
        .iter()
        .map(|&v| {
            T::try_from(v).map_err(|_| Failure::Usage(format!("value {v} does not fit the dtype")))
        })
        .collect()
}

fn pack_file(input: &Path, dtype: DTypeArg, dims: Vec<u32>, out: &Path) -> Result<(), Failure> {
    let values = parse_values(&fs::read_to_string(input)?)?;
    let data = match dtype {
        DTypeArg::Int8 => TensorData::Int8(narrow(&values)?),
        DTypeArg::Int4 => TensorData::Int4(narrow(&values)?),
        DTypeArg::Int16 => TensorData::Int16(narrow(&values)?),
        DTypeArg::Int32 => TensorData::Int32(narrow(&values)?),
    };
    let tensor = Tensor::new(dims, data)?;
    let bytes = tensor.to_bytes();
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, out)?;
    Ok(())
}

fn unpack_file(input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let tensor = read_tensor_file(input)?;
    let (name, values): (&str, Vec<String>) = match &tensor.data {
        TensorData::Int8(v) => ("int8", v.iter().map(ToString::to_string).collect()),
        TensorData::Int4(v) => ("int4", v.iter().map(ToString::to_string).collect()),
        TensorData::Int16(v) => ("int16", v.iter().map(ToString::to_string).collect()),
        TensorData::Int32(v) => ("int32", v.iter().map(ToString::to_string).collect()),
    };
    let dims: Vec<String> = tensor.dims.iter().map(ToString::to_string).collect();
    let text = format!(
        "# dtype={name} dims={}\n{}\n",
        dims.join(","),
        values.join(",")
    );
    emit(out, &text)
}
