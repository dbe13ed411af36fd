//! Command-line surface. `run` executes one parsed invocation; `main` only
//! maps its result to an exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Settings;
use crate::data::{gen_dataset, load_manifest, read_bag, write_dataset};
use crate::error::{Error, Result};
use crate::hook::hook_similarity;
use crate::rng::seeded;
use crate::theory::complexity_bench;
use crate::train::{
    evaluate_predictions, fmt_sig, hooks_sweep, lambda_sweep, metrics_csv, predict_split, sweep_csv, train,
    METRICS_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "hookmil", version, about = "Hook-token multiple instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic MIL dataset (bag files plus train/val/test manifests).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.hkck and metrics.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Dataset directory containing train.tsv and val.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for predictions.csv and eval_metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-time of the hook block against dense self-attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2048,4096,8192")]
        n_grid: Vec<usize>,
        #[arg(short = 'k', long, default_value_t = 8)]
        hooks: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fixed-seed verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        jacobian_points: usize,
    },
    /// Dump attention maps and the hook similarity matrix for one bag.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// HKB1 bag file.
        #[arg(long)]
        bag: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per λ value.
    SweepLambda {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.5,1.0")]
        lambdas: Vec<f64>,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per hook count K.
    SweepHooks {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        hooks_grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// `key=value` config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub n_clusters: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub train_bags: Option<usize>,
    #[arg(long)]
    pub val_bags: Option<usize>,
    #[arg(long)]
    pub test_bags: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// `hookmil` or `abmil`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(short = 'k', long = "hooks")]
    pub hooks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "attn-dim")]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `tn`, `tn:<std>` or `external:<path.hkb>`.
    #[arg(long)]
    pub hook_init: Option<String>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

impl SynthArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "task", &self.task);
        push(&mut o, "dim", &self.dim);
        push(&mut o, "n_min", &self.n_min);
        push(&mut o, "n_max", &self.n_max);
        push(&mut o, "n_clusters", &self.n_clusters);
        push(&mut o, "separation", &self.separation);
        push(&mut o, "train_bags", &self.train_bags);
        push(&mut o, "val_bags", &self.val_bags);
        push(&mut o, "test_bags", &self.test_bags);
        push(&mut o, "data_seed", &self.data_seed);
        o
    }
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "model", &self.model);
        push(&mut o, "k", &self.hooks);
        push(&mut o, "heads", &self.heads);
        push(&mut o, "rounds", &self.rounds);
        push(&mut o, "lambda", &self.lambda);
        push(&mut o, "d_a", &self.attn_dim);
        push(&mut o, "lr", &self.lr);
        push(&mut o, "weight_decay", &self.weight_decay);
        push(&mut o, "epochs", &self.epochs);
        push(&mut o, "seed", &self.seed);
        push(&mut o, "hook_init", &self.hook_init);
        push(&mut o, "num_classes", &self.num_classes);
        o
    }
}

fn settings(common: &CommonArgs, overrides: &[(&'static str, String)]) -> Result<Settings> {
    let o: Vec<(&str, String)> = overrides.iter().map(|(k, v)| (*k, v.clone())).collect();
    Settings::layered(common.config.as_deref(), &o)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_split(data: &Path, name: &str, classes: usize) -> Result<Vec<crate::data::BagFeatures>> {
    load_manifest(&data.join(format!("{name}.tsv")), classes)
}

/// Executes one command, returning what it printed to stdout.
pub fn run(cli: Cli) -> Result<String> {
    let mut out = String::new();
    match cli.command {
        Command::GenData { common, synth, out: dir } => {
            let s = settings(&common, &synth.overrides())?;
            let ds = gen_dataset(&s.synth)?;
            create_dir(&dir)?;
            for (name, count) in write_dataset(&dir, &ds)? {
                writeln!(out, "{name}: {count} bags").ok();
            }
        }
        Command::Train { common, train: args, data, out: dir } => {
            let s = settings(&common, &args.overrides())?;
            let tr = load_split(&data, "train", s.train.classes)?;
            let va = load_split(&data, "val", s.train.classes)?;
            let outcome = train(&s.train, &tr, &va)?;
            create_dir(&dir)?;
            save_checkpoint(&dir.join("best.hkck"), &outcome.best, &s.train)?;
            write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.history))?;
            let b = outcome.best_metrics();
            writeln!(
                out,
                "best epoch {}: acc {} macro_f1 {} macro_auc {}",
                outcome.best_epoch,
                fmt_sig(b.accuracy),
                fmt_sig(b.macro_f1),
                fmt_sig(b.macro_auc)
            )
            .ok();
        }
        Command::Eval { checkpoint, manifest, out: dir } => {
            let ck = load_checkpoint(&checkpoint)?;
            let bags = load_manifest(&manifest, ck.config.classes)?;
            if let Some(b) = bags.iter().find(|b| b.features.cols() != ck.dim) {
                return Err(Error::Shape(format!(
                    "bag {} has {} features, checkpoint expects {}",
                    b.bag_id,
                    b.features.cols(),
                    ck.dim
                )));
            }
            let preds = predict_split(&ck.model, &bags)?;
            let m = evaluate_predictions(&ck.model, &bags, &preds, ck.config.lambda, 0)?;
            create_dir(&dir)?;
            let mut csv = String::from("bag_id,label,argmax");
            for c in 0..ck.config.classes {
                write!(csv, ",p{c}").ok();
            }
            csv.push('\n');
            for (b, p) in bags.iter().zip(&preds) {
                write!(csv, "{},{},{}", b.bag_id, b.label, p.argmax()).ok();
                for v in &p.probs {
                    write!(csv, ",{v}").ok();
                }
                csv.push('\n');
            }
            write_text(&dir.join("predictions.csv"), &csv)?;
            write_text(&dir.join("eval_metrics.csv"), &format!("{METRICS_HEADER}\n{}\n", m.csv_row()))?;
            writeln!(
                out,
                "acc {} macro_f1 {} macro_auc {}",
                fmt_sig(m.accuracy),
                fmt_sig(m.macro_f1),
                fmt_sig(m.macro_auc)
            )
            .ok();
        }
        Command::Bench {
            n_grid,
            hooks,
            dim,
            repeats,
            seed,
            out: dest,
        } => {
            let report = complexity_bench(&n_grid, hooks, dim, repeats, 10_000, &mut seeded(seed))?;
            let csv = report.to_csv();
            match dest {
                Some(p) => {
                    write_text(&p, &csv)?;
                    for (i, (h, d)) in report.growth_ratios().iter().enumerate() {
                        writeln!(
                            out,
                            "N {} -> {}: hook x{h:.2}, dense x{d:.2}",
                            report.timings[i].n,
                            report.timings[i + 1].n
                        )
                        .ok();
                    }
                }
                None => out.push_str(&csv),
            }
        }
        Command::Verify { seed, jacobian_points } => {
            let report = crate::verify::run(seed, jacobian_points)?;
            out.push_str(&report.render());
            if !report.hard_checks_pass() {
                return Err(Error::CheckFailed(out));
            }
        }
        Command::Inspect { checkpoint, bag, out: dir } => {
            let ck = load_checkpoint(&checkpoint)?;
            let bag = read_bag(&bag)?;
            if bag.features.cols() != ck.dim {
                return Err(Error::Shape(format!(
                    "bag has {} features, checkpoint expects {}",
                    bag.features.cols(),
                    ck.dim
                )));
            }
            let pred = ck.model.predict(&bag.features)?;
            create_dir(&dir)?;
            let mut pool = String::from("instance,weight\n");
            for (i, a) in pred.attention.iter().enumerate() {
                writeln!(pool, "{i},{a}").ok();
            }
            write_text(&dir.join("pooling.csv"), &pool)?;
            match &pred.hook {
                Some(h) => {
                    write_text(&dir.join("hook_attention.csv"), &matrix_csv(&h.a_h2x, "i"))?;
                    let s = hook_similarity(&h.logits, ck.model.div_eps);
                    write_text(&dir.join("similarity.csv"), &matrix_csv(&s, "h"))?;
                    writeln!(
                        out,
                        "wrote pooling.csv, hook_attention.csv ({}x{}), similarity.csv ({}x{}); mean off-diagonal |S| {}",
                        h.a_h2x.rows(),
                        h.a_h2x.cols(),
                        s.rows(),
                        s.cols(),
                        fmt_sig(crate::hook::mean_offdiag_similarity(&s))
                    )
                    .ok();
                }
                None => {
                    writeln!(out, "wrote pooling.csv; the model has no hook block").ok();
                }
            }
        }
        Command::SweepLambda {
            common,
            train: args,
            data,
            lambdas,
            out: dest,
        } => {
            let s = settings(&common, &args.overrides())?;
            let tr = load_split(&data, "train", s.train.classes)?;
            let va = load_split(&data, "val", s.train.classes)?;
            let cells = lambda_sweep(&s.train, &tr, &va, &lambdas)?;
            let csv = sweep_csv("lambda", &cells);
            write_text(&dest, &csv)?;
            out.push_str(&csv);
        }
        Command::SweepHooks {
            common,
            train: args,
            data,
            hooks_grid,
            out: dest,
        } => {
            let s = settings(&common, &args.overrides())?;
            let tr = load_split(&data, "train", s.train.classes)?;
            let va = load_split(&data, "val", s.train.classes)?;
            let cells = hooks_sweep(&s.train, &tr, &va, &hooks_grid)?;
            let csv = sweep_csv("hooks", &cells);
            write_text(&dest, &csv)?;
            out.push_str(&csv);
        }
    }
    Ok(out)
}

/// Header `,<prefix>0,<prefix>1,...` then one row per matrix row, values
/// printed with full round-trip precision.
fn matrix_csv(m: &crate::tensor::Matrix, prefix: &str) -> String {
    let mut s = String::from("row");
    for c in 0..m.cols() {
        write!(s, ",{prefix}{c}").ok();
    }
    s.push('\n');
    for r in 0..m.rows() {
        write!(s, "{r}").ok();
        for v in m.row(r) {
            write!(s, ",{v}").ok();
        }
        s.push('\n');
    }
    s
}

/// 0 success, 1 validation or check failure, 2 I/O or format error.
pub fn exit_code(result: &Result<String>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_io_or_format() => 2,
        Err(_) => 1,
    }
}
