//! The `xft` command-line pipeline.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::expert_load_histogram;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data::{load_instruction_dataset, synthetic_corpus, tokenize_corpus, write_instruction_dataset, ByteTokenizer, TokenizedExample, EOS};
use crate::error::{Result, XftError};
use crate::merge::{
    ewa_finalize, extract_shared, init_mixing_coefficients, init_unconstrained_coefficients, learn_mixing_coefficients, merge_xft,
    train_moe_ewa, EwaConfig, EwaSchedule, MixingCoefficients,
};
use crate::moe::{upcycle, MoeConfig, DEFAULT_ROUTER_STD};
use crate::tensor::Tensor;
use crate::train::{eval_loss, sft_train, TrainHyper, TrainReport};
use crate::transformer::{Model, ModelConfig};
use crate::verify::{run_suite, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "xft", version, about = "Upcycle, fine-tune and merge small decoder-only transformers")]
pub struct Cli {
    /// Seed for every random choice (falls back to XFT_SEED, then 0).
    #[arg(long, global = true, env = "XFT_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a randomly initialized dense model.
    Init(InitArgs),
    /// Write a synthetic instruction dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
    /// Fine-tune every parameter of a model.
    TrainSft {
        #[command(flatten)]
        io: TrainIo,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Train for the combined epoch and warmup budget of the MoE and merge phases.
        #[arg(long)]
        fairness: bool,
        /// Use the from-scratch preset (higher learning rate) instead of the fine-tuning one.
        #[arg(long, conflicts_with = "fairness")]
        pretrain: bool,
        #[arg(long, default_value_t = 1)]
        merge_epochs: usize,
        #[arg(long)]
        merge_warmup: Option<usize>,
    },
    /// Turn a dense model into a mixture of experts.
    Upcycle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        /// Experts per token, the shared expert included.
        #[arg(long, default_value_t = 6)]
        topk: usize,
        /// Use raw affinity scores as gates.
        #[arg(long)]
        no_normalization: bool,
        /// Plain top-K routing over all experts.
        #[arg(long)]
        no_shared_expert: bool,
        #[arg(long, default_value_t = DEFAULT_ROUTER_STD)]
        router_std: f64,
    },
    /// Fine-tune an MoE model, optionally with expert weight averaging.
    TrainMoe {
        #[command(flatten)]
        io: TrainIo,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Share rate for expert weight averaging after every update.
        #[arg(long)]
        ewa_beta: Option<f64>,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
        ewa_schedule: ScheduleArg,
    },
    /// Learn mixing coefficients of a fine-tuned MoE model.
    LearnMerge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Coefficients JSON output.
        #[arg(long)]
        coeffs_out: PathBuf,
        /// Also write the merged dense model.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.75)]
        lambda: f64,
        /// Learn the shared expert's weight too, one softmax over all experts.
        #[arg(long)]
        unconstrained: bool,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Collapse an MoE model into a dense one.
    Merge {
        #[arg(value_enum)]
        method: MergeMethod,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Coefficients JSON from learn-merge.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        /// Shared expert rate when no coefficients file is given.
        #[arg(long, default_value_t = 0.75)]
        lambda: f64,
    },
    /// Mean masked loss of a model on a dataset.
    EvalLoss {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy decoding from an instruction.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
    /// Per-expert routing proportions over a dataset.
    RouteStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; exits 3 if any check fails.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Expert count used when the model is dense.
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 6)]
        topk: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
}

#[derive(Args, Debug)]
struct TrainIo {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step losses, one per line.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct HyperArgs {
    /// Start from the full-scale hyperparameters instead of the desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
}

impl HyperArgs {
    fn apply(&self, desk: TrainHyper, full: TrainHyper, seed: u64) -> TrainHyper {
        let mut h = if self.full_scale { full } else { desk };
        h.epochs = self.epochs.unwrap_or(h.epochs);
        h.batch_size = self.batch_size.unwrap_or(h.batch_size);
        h.peak_lr = self.lr.unwrap_or(h.peak_lr);
        h.warmup_steps = self.warmup.unwrap_or(h.warmup_steps);
        h.seeded(seed)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Constant,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MergeMethod {
    /// Shared expert at rate λ, normal experts by the given coefficients.
    Xft,
    /// Uniform average of all experts.
    Uniform,
    /// Unconstrained learned coefficients over all experts.
    Soup,
    /// Uniform average after expert weight averaging training.
    Ewa,
    /// Keep only the shared expert.
    ExtractShared,
}

fn load_data(path: &Path, max_seq_len: usize) -> Result<Vec<TokenizedExample>> {
    let examples = load_instruction_dataset(path)?;
    let data = tokenize_corpus(&examples, max_seq_len);
    if data.is_empty() {
        return Err(XftError::Dataset {
            path: path.to_path_buf(),
            line: 0,
            message: format!("no example fits in {max_seq_len} tokens"),
        });
    }
    Ok(data)
}

fn write_losses(path: Option<&Path>, report: &TrainReport) -> Result<()> {
    if let Some(p) = path {
        let text: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
        fs::write(p, text).map_err(|e| XftError::io(p, e))?;
    }
    Ok(())
}

fn summarize(report: &TrainReport) {
    match (report.losses.first(), report.losses.last()) {
        (Some(a), Some(b)) => println!("steps {}  loss {a:.4} -> {b:.4}", report.steps),
        _ => println!("steps 0"),
    }
}

fn read_coeffs(path: &Path) -> Result<MixingCoefficients> {
    let text = fs::read_to_string(path).map_err(|e| XftError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| XftError::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| XftError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| XftError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Init(a) => {
            let config = ModelConfig { d_model: a.d_model, n_layers: a.layers, n_heads: a.heads, d_ff: a.d_ff, max_seq_len: a.max_seq_len, ..ModelConfig::desk() };
            let m = Model::<Tensor<f32>>::init_dense(config, seed)?;
            save_checkpoint(&m, &CheckpointMeta::new("init", seed), &a.out)?;
            println!("dense model, {} parameters -> {}", m.param_count(), a.out.display());
        }
        Command::Synth { out, count } => {
            write_instruction_dataset(&out, &synthetic_corpus(count, seed))?;
            println!("{count} examples -> {}", out.display());
        }
        Command::TrainSft { io, hyper, fairness, pretrain, merge_epochs, merge_warmup } => {
            let (mut m, _) = load_checkpoint(&io.model)?;
            let data = load_data(&io.data, m.config.max_seq_len)?;
            let desk = if pretrain { TrainHyper::desk_pretrain() } else { TrainHyper::desk_moe() };
            let mut h = hyper.apply(desk, TrainHyper::full_moe(), seed);
            if fairness {
                let merge_preset = if hyper.full_scale { TrainHyper::full_merge() } else { TrainHyper::desk_merge() };
                let merge = TrainHyper {
                    epochs: merge_epochs,
                    warmup_steps: merge_warmup.unwrap_or(merge_preset.warmup_steps),
                    ..merge_preset
                };
                h = TrainHyper::fairness(&h, &merge);
            }
            log::info!("sft: {h:?}");
            let report = sft_train(&mut m, &data, &h)?;
            summarize(&report);
            write_losses(io.loss_log.as_deref(), &report)?;
            save_checkpoint(&m, &CheckpointMeta::new("sft", seed), &io.out)?;
        }
        Command::Upcycle { model, out, experts, topk, no_normalization, no_shared_expert, router_std } => {
            let (dense, _) = load_checkpoint(&model)?;
            let cfg = MoeConfig {
                num_experts: experts,
                top_k: topk,
                normalization: !no_normalization,
                shared_expert: !no_shared_expert,
                router_init_std: router_std,
            };
            let m = upcycle(&dense, &cfg, seed)?;
            save_checkpoint(&m, &CheckpointMeta::new("upcycle", seed), &out)?;
            println!("{experts} experts, top-{topk}, {} parameters -> {}", m.param_count(), out.display());
        }
        Command::TrainMoe { io, hyper, ewa_beta, ewa_schedule } => {
            let (mut m, _) = load_checkpoint(&io.model)?;
            if !m.is_moe() {
                return Err(XftError::Config(format!("{} is not an MoE checkpoint", io.model.display())));
            }
            let data = load_data(&io.data, m.config.max_seq_len)?;
            let h = hyper.apply(TrainHyper::desk_moe(), TrainHyper::full_moe(), seed);
            let (report, phase) = match ewa_beta {
                Some(beta) => {
                    let schedule = match ewa_schedule {
                        ScheduleArg::Constant => EwaSchedule::Constant,
                        ScheduleArg::Linear => EwaSchedule::Linear,
                    };
                    (train_moe_ewa(&mut m, &data, &h, &EwaConfig { beta, schedule })?, "moe-ewa")
                }
                None => (sft_train(&mut m, &data, &h)?, "moe"),
            };
            summarize(&report);
            write_losses(io.loss_log.as_deref(), &report)?;
            save_checkpoint(&m, &CheckpointMeta::new(phase, seed), &io.out)?;
        }
        Command::LearnMerge { model, data, coeffs_out, out, lambda, unconstrained, hyper, loss_log } => {
            let (m, _) = load_checkpoint(&model)?;
            let cfg = m.moe.clone().ok_or_else(|| XftError::Config(format!("{} is not an MoE checkpoint", model.display())))?;
            let data = load_data(&data, m.config.max_seq_len)?;
            let init = if unconstrained {
                init_unconstrained_coefficients(&cfg, m.blocks.len(), lambda)?
            } else {
                init_mixing_coefficients(&cfg, m.blocks.len(), lambda)?
            };
            let h = hyper.apply(TrainHyper::desk_merge(), TrainHyper::full_merge(), seed);
            let (coeffs, report) = learn_mixing_coefficients(&m, &data, &init, &h)?;
            summarize(&report.train);
            println!("max simplex deviation {:.3e}", report.max_simplex_violation);
            for (l, a) in coeffs.all_alphas().iter().enumerate() {
                println!("layer {l}: shared {:.4}", a[0]);
            }
            write_losses(loss_log.as_deref(), &report.train)?;
            write_json(&coeffs_out, &coeffs)?;
            if let Some(out) = out {
                let merged = merge_xft(&m, &coeffs)?;
                save_checkpoint(&merged, &CheckpointMeta { lambda: Some(lambda), ..CheckpointMeta::new("merge", seed) }, &out)?;
            }
        }
        Command::Merge { method, model, out, coeffs, lambda } => {
            let (m, _) = load_checkpoint(&model)?;
            let cfg = m.moe.clone().ok_or_else(|| XftError::Config(format!("{} is not an MoE checkpoint", model.display())))?;
            let layers = m.blocks.len();
            let (merged, lam) = match method {
                MergeMethod::Xft => {
                    let c = match &coeffs {
                        Some(p) => read_coeffs(p)?,
                        None => init_mixing_coefficients(&cfg, layers, lambda)?,
                    };
                    if !c.constrained {
                        return Err(XftError::Config("xft merge needs constrained coefficients; use `merge soup`".into()));
                    }
                    let lam = c.lambda;
                    (merge_xft(&m, &c)?, Some(lam))
                }
                MergeMethod::Soup => {
                    let p = coeffs.as_ref().ok_or_else(|| XftError::Config("soup merge needs --coeffs".into()))?;
                    let c = read_coeffs(p)?;
                    if c.constrained {
                        return Err(XftError::Config("soup merge needs unconstrained coefficients".into()));
                    }
                    (merge_xft(&m, &c)?, None)
                }
                MergeMethod::Uniform | MergeMethod::Ewa => (ewa_finalize(&m)?, None),
                MergeMethod::ExtractShared => (extract_shared(&m)?, Some(1.0)),
            };
            save_checkpoint(&merged, &CheckpointMeta { lambda: lam, ..CheckpointMeta::new("merge", seed) }, &out)?;
            println!("dense model, {} parameters -> {}", merged.param_count(), out.display());
        }
        Command::EvalLoss { model, data } => {
            let (m, _) = load_checkpoint(&model)?;
            let data = load_data(&data, m.config.max_seq_len)?;
            println!("{:.6}", eval_loss(&m, &data)?);
        }
        Command::Generate { model, prompt, max_new } => {
            let (m, _) = load_checkpoint(&model)?;
            let tok = ByteTokenizer;
            let p = tok.prompt(&prompt);
            let out = m.generate_greedy(&p, max_new, Some(EOS))?;
            println!("{}", tok.decode(&out[p.len()..]));
        }
        Command::RouteStats { model, data, out } => {
            let (m, _) = load_checkpoint(&model)?;
            let examples = load_data(&data, m.config.max_seq_len)?;
            let corpus: Vec<Vec<usize>> = examples.into_iter().map(|e| e.tokens).collect();
            let report = expert_load_histogram(&m, &corpus, &data.display().to_string())?;
            print!("{}", report.bar_chart());
            if let Some(p) = out {
                fs::write(&p, report.to_json() + "\n").map_err(|e| XftError::io(&p, e))?;
            }
        }
        Command::Verify { model, experts, topk, json } => {
            let (m, _) = load_checkpoint(&model)?;
            let checks = run_suite(&m, &MoeConfig::new(experts, topk), seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&checks).expect("outcomes serialize"));
            } else {
                for c in &checks {
                    let tag = match c.status {
                        Status::Pass => "PASS",
                        Status::Fail => "FAIL",
                        Status::Skip => "SKIP",
                    };
                    println!("{tag} {:<18} {:.3e} (tol {:.0e})  {}", c.name, c.value, c.tolerance, c.detail);
                }
            }
            let failed: Vec<&str> = checks.iter().filter(|c| c.status == Status::Fail).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(XftError::Verification(failed.join(", ")));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
