//! Batch CLI for the rotation/quantization experiments.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 file format
//! error, 4 a verification check failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rotaquant::container::{self, FormatError};
use rotaquant::experiment::{ExperimentConfig, Manifest};
use rotaquant_core::corpus;
use rotaquant_core::lora::{self, ProjKind, Recipe};
use rotaquant_core::model::{self, init_model};
use rotaquant_core::quant::{self, QuantSpec, WeightQuantizer};
use rotaquant_core::rotation::{apply_rotation_plan, verify_invariance};

const EXIT_CONFIG: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_CHECK: u8 = 4;

/// A verification ran to completion and failed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct CheckFailed(String);

#[derive(Parser)]
#[command(name = "rotaquant", version, about = "Rotation-based outlier elimination experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config JSON; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (beats the config file and ROTAQUANT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct QuantFlags {
    #[arg(long)]
    weight_bits: Option<u32>,
    #[arg(long)]
    act_bits: Option<u32>,
    /// rtn or gptq.
    #[arg(long)]
    quantizer: Option<String>,
    #[arg(long)]
    clip_ratio: Option<f64>,
}

impl QuantFlags {
    fn apply(&self, spec: &mut QuantSpec) -> anyhow::Result<()> {
        if let Some(b) = self.weight_bits {
            spec.weight_bits = b;
        }
        if let Some(b) = self.act_bits {
            spec.act_bits = b;
        }
        if let Some(q) = &self.quantizer {
            spec.weight_quantizer = match q.as_str() {
                "rtn" => WeightQuantizer::Rtn,
                "gptq" => WeightQuantizer::Gptq,
                other => return Err(anyhow!("unknown quantizer '{other}' (rtn|gptq)")),
            };
        }
        if let Some(c) = self.clip_ratio {
            spec.clip_ratio = c;
        }
        spec.validate().map_err(|e| anyhow!("{e}"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a seeded model checkpoint.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the rotation rewrites and verify logits invariance.
    Rotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Skip the invariance check (not recommended).
        #[arg(long)]
        no_verify: bool,
    },
    /// Fine-tune adapters (or all weights) and write the merged checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (step,loss,kurtosis).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the raw adapters next to the merged model.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Quantize projection weights and write codes, scales, and zero points.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Held-out loss of a checkpoint, exact and optionally fake-quantized.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Also evaluate under fake quantization.
        #[arg(long)]
        quantized: bool,
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Diagnostics; each writes a CSV.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Compare logits of two checkpoints on random sequences.
    InvarianceCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        rewritten: PathBuf,
        #[arg(long, default_value_t = 64)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Activation kurtosis per capture point.
    Kurtosis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Low-rank approximation error of fine-tuning deltas under both adapter
    /// placements, per rank.
    Fig4 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        ranks: Vec<usize>,
    },
    /// Per-layer local and accumulated quantization error.
    Qerror {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantFlags,
    },
    /// Degradation of the three pipeline recipes under one quant spec.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        quant: QuantFlags,
    },
}

fn load_cfg(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.model.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(cfg)
}

fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Manifest::new(cfg).write(dir)
}

fn load_model(path: &Path) -> anyhow::Result<model::ModelCheckpoint> {
    Ok(container::load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))?)
}

fn eval_windows(cfg: &ExperimentConfig, heldout: &[u32]) -> anyhow::Result<Vec<Vec<u32>>> {
    Ok(corpus::fixed_windows(heldout, cfg.model.seq_len.min(heldout.len()), 8)
        .map_err(|e| anyhow!("{e}"))?)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Init { common, out } => {
            let cfg = load_cfg(&common)?;
            let m = init_model(&cfg.model).map_err(|e| anyhow!("{e}"))?;
            container::save_checkpoint(&m, &out)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {} ({} parameters)", out.display(), cfg.model.param_count());
        }
        Command::Rotate { common, model, out, trials, tol, no_verify } => {
            let cfg = load_cfg(&common)?;
            let original = load_model(&model)?;
            let rotated = apply_rotation_plan(original.clone(), &cfg.rotation)
                .map_err(|e| anyhow!("{e}"))?;
            if !no_verify {
                let rep = verify_invariance(&original, &rotated, trials, tol)
                    .map_err(|e| anyhow!("{e}"))?;
                if !rep.pass {
                    // Refuse to write a checkpoint that changed the function.
                    return Err(CheckFailed(format!(
                        "invariance failed: max deviation {:.3e} > tol {tol:.3e}; not writing {}",
                        rep.max_deviation,
                        out.display()
                    ))
                    .into());
                }
                println!("invariance ok: max deviation {:.3e} over {trials} trials", rep.max_deviation);
            }
            container::save_checkpoint(&rotated, &out)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { common, model, out, log, adapters } => {
            let cfg = load_cfg(&common)?;
            let m = load_model(&model)?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let (train, _) = corpus::split(&tokens, 0.1);
            let state = lora::attach_adapters(m, cfg.finetune.clone()).map_err(|e| anyhow!("{e}"))?;
            let (state, rows) = lora::finetune(state, train).map_err(|e| anyhow!("{e}"))?;
            let merged = lora::merge_adapters(&state).map_err(|e| anyhow!("{e}"))?;
            container::save_checkpoint(&merged, &out)?;
            if let Some(path) = adapters {
                let meta = serde_json::to_value(&cfg.finetune)?;
                container::adapters_to_container(&state.adapters, meta).save(&path)?;
            }
            if let Some(path) = log {
                let lines: Vec<String> = rows
                    .iter()
                    .map(|r| {
                        let k = r.kurtosis.map_or(String::new(), |k| format!("{k:.6}"));
                        format!("{},{:.6},{k}", r.step, r.loss)
                    })
                    .collect();
                write_csv(&path, "step,loss,kurtosis", &lines)?;
            }
            write_manifest(&cfg, &out)?;
            let last = rows.last().map_or(f64::NAN, |r| r.loss);
            println!("wrote {} (final train loss {last:.4})", out.display());
        }
        Command::Quantize { common, model, out, quant } => {
            let mut cfg = load_cfg(&common)?;
            quant.apply(&mut cfg.quant)?;
            let m = load_model(&model)?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let (train, _) = corpus::split(&tokens, 0.1);
            let calib = eval_windows(&cfg, train)?;
            let quantized = quant_projections(&m, &cfg.quant, &calib)?;
            let meta = serde_json::to_value(&cfg.quant)?;
            container::quantized_to_container(&quantized, meta).save(&out)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {} ({} tensors)", out.display(), quantized.len());
        }
        Command::Eval { common, model, quantized, quant } => {
            let mut cfg = load_cfg(&common)?;
            quant.apply(&mut cfg.quant)?;
            let m = load_model(&model)?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let (train, heldout) = corpus::split(&tokens, 0.1);
            let windows = eval_windows(&cfg, heldout)?;
            let mut exact = 0.0;
            for w in &windows {
                exact += model::sequence_loss(&m, w, None).map_err(|e| anyhow!("{e}"))?;
            }
            exact /= windows.len() as f64;
            let mut report = serde_json::json!({ "exact_loss": exact });
            if quantized {
                let calib = eval_windows(&cfg, train)?;
                let fq = quant::fake_quant_weights(&m, &cfg.quant, &calib)
                    .map_err(|e| anyhow!("{e}"))?;
                let mut qloss = 0.0;
                for w in &windows {
                    qloss += fq.loss(w).map_err(|e| anyhow!("{e}"))?;
                }
                qloss /= windows.len() as f64;
                report["quant_loss"] = serde_json::json!(qloss);
                report["degradation"] = serde_json::json!(qloss - exact);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Analyze(a) => run_analyze(a)?,
        Command::InvarianceCheck { common, original, rewritten, trials, tol } => {
            let _ = load_cfg(&common)?;
            let a = load_model(&original)?;
            let b = load_model(&rewritten)?;
            let rep = verify_invariance(&a, &b, trials, tol).map_err(|e| anyhow!("{e}"))?;
            println!(
                "max deviation {:.3e} over {} trials (tol {:.1e})",
                rep.max_deviation, rep.trials, tol
            );
            if !rep.pass {
                return Err(CheckFailed("invariance check failed".into()).into());
            }
        }
    }
    Ok(())
}

fn run_analyze(a: Analyze) -> anyhow::Result<()> {
    match a {
        Analyze::Kurtosis { common, model, out } => {
            let cfg = load_cfg(&common)?;
            let m = load_model(&model)?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let windows = eval_windows(&cfg, &tokens)?;
            let points = model::all_capture_points(&m.config);
            // Average stats over windows per point.
            let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
            for w in &windows {
                for s in
                    rotaquant_core::analysis::capture_stats(&m, w, &points).map_err(|e| anyhow!("{e}"))?
                {
                    let peak = s.per_channel_max_abs.iter().cloned().fold(0.0, f64::max);
                    let e = acc.entry(s.point).or_insert((0.0, 0.0, 0));
                    e.0 += s.kurtosis;
                    e.1 = e.1.max(peak);
                    e.2 += 1;
                }
            }
            let rows: Vec<String> = acc
                .iter()
                .map(|(p, (ksum, peak, n))| format!("{p},{:.6},{peak:.6}", ksum / *n as f64))
                .collect();
            write_csv(&out, "point,kurtosis,max_abs", &rows)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Analyze::Fig4 { common, out, ranks } => {
            let cfg = load_cfg(&common)?;
            let base = init_model(&cfg.model).map_err(|e| anyhow!("{e}"))?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let q = rotaquant_core::hadamard::randomized_hadamard(cfg.model.d_model, cfg.rotation.seed)
                .map_err(|e| anyhow!("{e}"))?;
            let targets = [ProjKind::Wq, ProjKind::Wv];
            let rows = lora::run_fig4(&base, &tokens, &cfg.finetune, &q, &ranks, &targets)
                .map_err(|e| anyhow!("{e}"))?;
            let lines: Vec<String> = rows
                .iter()
                .map(|r| format!("{},{},{},{:.8}", r.target, r.scheme, r.rank, r.error))
                .collect();
            write_csv(&out, "target,scheme,rank,error", &lines)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Analyze::Qerror { common, model, out, quant } => {
            let mut cfg = load_cfg(&common)?;
            quant.apply(&mut cfg.quant)?;
            let m = load_model(&model)?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let (train, heldout) = corpus::split(&tokens, 0.1);
            let calib = eval_windows(&cfg, train)?;
            let probe = &eval_windows(&cfg, heldout)?[0];
            let rows = quant::layer_quant_error(&m, probe, &cfg.quant, &calib)
                .map_err(|e| anyhow!("{e}"))?;
            let lines: Vec<String> = rows
                .iter()
                .map(|r| format!("{},{:.8},{:.8}", r.layer, r.local, r.accumulated))
                .collect();
            write_csv(&out, "layer,local,accumulated", &lines)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Analyze::Ablate { common, out, quant } => {
            let mut cfg = load_cfg(&common)?;
            quant.apply(&mut cfg.quant)?;
            let base = init_model(&cfg.model).map_err(|e| anyhow!("{e}"))?;
            let tokens = corpus::synthetic_corpus(cfg.corpus.seed, cfg.corpus.len, cfg.model.vocab)
                .map_err(|e| anyhow!("{e}"))?;
            let mut lines = Vec::new();
            for recipe in [Recipe::Rolora, Recipe::PostTrainingRotation, Recipe::Plain] {
                let rep = lora::run_pipeline(
                    &base,
                    recipe,
                    &cfg.finetune,
                    &cfg.quant,
                    &tokens,
                    &cfg.rotation,
                )
                .map_err(|e| anyhow!("{e}"))?;
                let name = match recipe {
                    Recipe::Rolora => "rolora",
                    Recipe::PostTrainingRotation => "post_training_rotation",
                    Recipe::Plain => "plain",
                };
                lines.push(format!(
                    "{name},{:.6},{:.6},{:.6}",
                    rep.exact_loss, rep.quant_loss, rep.degradation
                ));
                println!("{name}: degradation {:.4} nats", rep.degradation);
            }
            write_csv(&out, "recipe,exact_loss,quant_loss,degradation", &lines)?;
            write_manifest(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Quantize the seven projection weights of every layer.
fn quant_projections(
    m: &model::ModelCheckpoint,
    spec: &QuantSpec,
    calib: &[Vec<u32>],
) -> anyhow::Result<BTreeMap<String, quant::QuantizedTensor>> {
    // Reuse the fake-quant capture plumbing for GPTQ calibration by
    // quantizing from the dequantized model's inputs; for tensor artifacts we
    // quantize each projection directly.
    let mut out = BTreeMap::new();
    let fields = ["wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"];
    let captures: Vec<String> = model::projection_input_points(&m.config);
    let mut traces = Vec::new();
    if spec.weight_quantizer == WeightQuantizer::Gptq {
        for seq in calib {
            traces.push(model::forward(m, seq, &captures, None).map_err(|e| anyhow!("{e}"))?);
        }
    }
    for layer in 0..m.config.n_layers {
        for field in fields {
            let name = format!("layers.{layer}.{field}");
            let (rows, cols) = m.param_shape(&name).map_err(|e| anyhow!("{e}"))?;
            let w = rotaquant_core::linalg::Matrix::from_vec(
                rows,
                cols,
                m.param(&name).map_err(|e| anyhow!("{e}"))?.to_vec(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let qt = match spec.weight_quantizer {
                WeightQuantizer::Rtn => {
                    quant::rtn_quantize_weight(&w, spec.weight_bits, spec.clip_ratio)
                        .map_err(|e| anyhow!("{e}"))?
                }
                WeightQuantizer::Gptq => {
                    let point = capture_for(layer, field);
                    let parts: Vec<_> = traces
                        .iter()
                        .map(|t| t.captures.get(&point).cloned().expect("captured"))
                        .collect();
                    let rows_total: usize = parts.iter().map(|p| p.rows()).sum();
                    let mut x = rotaquant_core::linalg::Matrix::zeros(rows_total, parts[0].cols());
                    let mut at = 0;
                    for p in &parts {
                        for i in 0..p.rows() {
                            x.row_mut(at).copy_from_slice(p.row(i));
                            at += 1;
                        }
                    }
                    quant::gptq_quantize_weight(&w, &x, spec.weight_bits)
                        .map_err(|e| anyhow!("{e}"))?
                }
            };
            out.insert(name, qt);
        }
    }
    Ok(out)
}

fn capture_for(layer: usize, field: &str) -> String {
    match field {
        "wq" | "wk" | "wv" => format!("l{layer}.attn_in"),
        "wo" => format!("l{layer}.o_in"),
        "w_up" | "w_gate" => format!("l{layer}.ffn_in"),
        "w_down" => format!("l{layer}.down_in"),
        _ => unreachable!("unknown projection field"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<FormatError>()) {
                ExitCode::from(EXIT_FORMAT)
            } else if e.chain().any(|c| c.is::<CheckFailed>()) {
                ExitCode::from(EXIT_CHECK)
            } else {
                ExitCode::from(EXIT_CONFIG)
            }
        }
    }
}
