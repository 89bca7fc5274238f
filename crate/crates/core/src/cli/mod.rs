//! The `duralign` command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 config or input error, 3 I/O
//! error.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{extract_overrides, RunConfig, KEYS};

use crate::aligner::inferred_frame_count;
use crate::autodiff::nn::Mode;
use crate::autodiff::{check_gradients_ladder, GradCheckOptions, ParameterStore, Real, Tensor};
use crate::data::{
    batch_iterator, generate_corpus, load_corpus, save_corpus, split_held_out, Utterance,
};
use crate::model::{
    evaluate_with, load_checkpoint, save_checkpoint, DurationSpan, LatentSource, Model,
    ModelConfig, Trainer,
};
use crate::softdtw::oracle::{
    dense_soft_dtw, gradient_check, hard_dtw_oracle, path_enumeration_soft_dtw,
};
use crate::softdtw::{soft_dtw, SoftDtwConfig};
use crate::{exec, Error, ExecPolicy, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "duralign",
    version,
    about = "Duration modeling, learned upsampling and Soft-DTW experiments",
    after_help = "Every config key can also be passed as `--key value`; see `key = value` files."
)]
struct Cli {
    /// `key = value` config file, applied before `--key value` overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialization, data and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known durations.
    GenData {
        /// Corpus spec (`key = value`); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint plus `<out>.losses.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: u64,
    },
    /// Finite-difference check of the full model at 64-bit on a micro config.
    /// Each element is differenced at steps 1e-4, 3e-5 and 1e-5 and scored by
    /// the closest agreement, since L1 frame costs make the loss piecewise smooth.
    GradCheck,
    /// Soft-DTW against exact oracles on random pairs.
    DtwCheck(DtwCheckArgs),
    /// Synthesize from token ids with optional duration control.
    Infer(InferArgs),
    /// Score a checkpoint on the held-out split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DtwCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 3)]
    max_dim: usize,
    #[arg(long, hide = true)]
    corrupt_warp: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated token ids.
    #[arg(long)]
    tokens: String,
    /// Scale every predicted duration.
    #[arg(long, conflicts_with = "span")]
    scale: Option<f64>,
    /// `start:end:factor` over token indices `start..end`; repeatable.
    #[arg(long)]
    span: Vec<String>,
    /// Write the attention matrix as text here and as a PGM image next to it.
    #[arg(long)]
    dump_align: Option<PathBuf>,
    /// Prefix for `<out>.spec.csv` and `<out>.durations.csv`.
    #[arg(long, default_value = "infer")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn precision() -> Result<Precision> {
    match std::env::var("DURALIGN_PRECISION") {
        Err(_) => Ok(Precision::F32),
        Ok(v) => match v.trim() {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "DURALIGN_PRECISION must be 32 or 64, got `{other}`"
            ))),
        },
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite(_) | Error::Shape { .. } => EXIT_CHECK_FAILED,
        _ => EXIT_CONFIG,
    }
}

pub fn main() -> i32 {
    run(std::env::args().collect())
}

/// Parse `args` (including the program name) and run the command.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(x) => x,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let base = match &cli.cmd {
        Command::GradCheck => RunConfig {
            model: micro_config(),
            ..RunConfig::default()
        },
        _ => RunConfig::default(),
    };
    let cfg = match resolve(base, &cli, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    println!("# resolved config");
    print!("{}", cfg.render());
    println!("threads = {}", cli.threads);
    let exec = if cli.threads > 1 {
        ExecPolicy::best()
    } else {
        ExecPolicy::Sequential
    };
    let outcome = exec::with_threads(cli.threads, || dispatch(&cli, &cfg, exec));
    match outcome {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn resolve(mut cfg: RunConfig, cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    if let Command::GenData { spec: Some(p), .. } = &cli.cmd {
        cfg.apply_file(p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig, exec: ExecPolicy) -> Result<i32> {
    match &cli.cmd {
        Command::GenData { out, .. } => gen_data(cfg, out),
        Command::Train { data, out, steps } => match precision()? {
            Precision::F32 => train::<f32>(cfg, data, out, *steps, exec),
            Precision::F64 => train::<f64>(cfg, data, out, *steps, exec),
        },
        Command::GradCheck => grad_check(&cfg.model),
        Command::DtwCheck(a) => dtw_check(a, &cfg.model.softdtw, cfg.model.seed, exec),
        Command::Infer(a) => match precision()? {
            Precision::F32 => infer::<f32>(a, &cfg.model),
            Precision::F64 => infer::<f64>(a, &cfg.model),
        },
        Command::Eval { checkpoint, data } => match precision()? {
            Precision::F32 => eval::<f32>(&cfg.model, checkpoint, data, exec),
            Precision::F64 => eval::<f64>(&cfg.model, checkpoint, data, exec),
        },
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let corpus = generate_corpus(&cfg.corpus)?;
    save_corpus(&corpus, out)?;
    println!("wrote {} utterances to {}", corpus.len(), out.display());
    Ok(EXIT_OK)
}

fn check_corpus(model: &ModelConfig, corpus: &[Utterance]) -> Result<()> {
    for (i, u) in corpus.iter().enumerate() {
        if u.frames.shape()[1] != model.feature_dim {
            return Err(Error::Config(format!(
                "utterance {i} has {} features, config feature_dim = {}",
                u.frames.shape()[1],
                model.feature_dim
            )));
        }
        if let Some(&id) = u.ids.iter().find(|&&id| id >= model.vocab_size) {
            return Err(Error::Config(format!(
                "utterance {i} uses token {id}, config vocab_size = {}",
                model.vocab_size
            )));
        }
    }
    Ok(())
}

/// `<out>.losses.csv` next to the checkpoint.
pub fn losses_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".losses.csv");
    PathBuf::from(s)
}

fn train<T: Real>(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    steps: u64,
    exec: ExecPolicy,
) -> Result<i32> {
    let corpus = load_corpus(data)?;
    check_corpus(&cfg.model, &corpus)?;
    let (train_set, _) = split_held_out(&corpus);
    let mut trainer = Trainer::<T>::new(Model::new(cfg.model.clone())?)?;
    trainer.exec = exec;
    let mut batches = batch_iterator(train_set, cfg.model.batch_size, cfg.model.seed)?;

    let csv_path = losses_path(out);
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    let io = |e| Error::io(&csv_path, e);
    writeln!(csv, "step,spec,dur,kl,beta,total").map_err(io)?;
    for _ in 0..steps {
        let batch = batches.next().ok_or(Error::Empty("training split"))?;
        let s = trainer.train_step(&batch)?;
        if !s.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if (s.step - 1) % 10 == 0 {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                s.step, s.spec, s.dur, s.kl, s.beta, s.total
            )
            .map_err(io)?;
        }
        if s.step % 100 == 0 || s.step == steps {
            println!(
                "step {:>6}  total {:.4}  spec {:.4}  dur {:.4}  kl {:.4}  beta {:.3}",
                s.step, s.total, s.spec, s.dur, s.kl, s.beta
            );
        }
    }
    csv.flush().map_err(io)?;
    save_checkpoint(&trainer.store, out)?;
    println!("wrote checkpoint {} after {steps} steps", out.display());
    Ok(EXIT_OK)
}

/// Tiny architecture used by `grad-check`; config keys still override it.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        model_dim: 6,
        feature_dim: 4,
        latent_dim: 2,
        blocks: 2,
        ffn_dim: 6,
        ..ModelConfig::default()
    }
}

fn grad_check(model_cfg: &ModelConfig) -> Result<i32> {
    const TOL: f64 = 1e-3;
    let model = Model::new(model_cfg.clone())?;
    let store = model.init_store::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
    let k = rng.random_range(2..=4usize);
    let frames = rng.random_range(k..=10usize);
    let ids: Vec<usize> = (0..k)
        .map(|_| rng.random_range(0..model_cfg.vocab_size))
        .collect();
    let target = Tensor::from_fn(vec![frames, model_cfg.feature_dim], |_| {
        rng.random_range(-1.0..1.0)
    });
    let eps = Tensor::from_fn(vec![k, model_cfg.latent_dim], |_| {
        rng.random_range(-1.0..1.0)
    });
    println!("tokens {ids:?}, frames {frames}");
    let report = check_gradients_ladder(
        &store,
        |g, st| {
            let latent = LatentSource::Posterior { eps: eps.clone() };
            let fwd = model.forward(
                g,
                st,
                &ids,
                Some(&target),
                &latent,
                Some(frames),
                &[],
                Mode::Train,
            )?;
            Ok(model.loss(g, &fwd, &target, 0.5)?.total)
        },
        &[1e-4, 3e-5, 1e-5],
        &GradCheckOptions::default(),
    )?;
    print!("{}", report.table());
    let worst = report.max_rel_err();
    if report.passed(TOL) {
        println!("PASS max rel err {worst:.3e} <= {TOL:e}");
        Ok(EXIT_OK)
    } else {
        for p in report.failures(TOL) {
            println!("FAIL {} max rel err {:.3e}", p.name, p.max_rel_err);
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Relative-error floor for the Soft-DTW gradient check. Losses carry warp
/// penalties in the hundreds, so central differences have ~1e-10 absolute
/// roundoff; entries are O(1), and tiny ones are held to 1e-6 absolute.
pub const GRAD_FLOOR: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Default, Clone, Copy)]
struct Worst {
    oracle: f64,
    hard: f64,
    band: f64,
    grad: f64,
    skipped: usize,
}

fn dtw_trial(seed: u64, trial: usize, a: &DtwCheckArgs, base: &SoftDtwConfig) -> Result<Worst> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let (tx, ty) = (
        rng.random_range(1..=a.max_len),
        rng.random_range(1..=a.max_len),
    );
    let f = rng.random_range(1..=a.max_dim);
    let x = Tensor::from_fn(vec![tx, f], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(vec![ty, f], |_| rng.random_range(-1.0..1.0));
    let ix = base.cost_indexing;
    let cfg = SoftDtwConfig {
        gamma: 0.05,
        warp: 128.0,
        corrupt_horizontal_warp: a.corrupt_warp,
        ..*base
    }
    .full_band(tx, ty);

    let (soft, _) = soft_dtw(&x, &y, &cfg)?;
    let oracle = (soft - path_enumeration_soft_dtw(&x, &y, cfg.gamma, cfg.warp, ix)).abs();
    let band = (soft - dense_soft_dtw(&x, &y, cfg.gamma, cfg.warp, ix)).abs();
    let sharp = SoftDtwConfig { gamma: 1e-4, ..cfg };
    let hard = (soft_dtw(&x, &y, &sharp)?.0 - hard_dtw_oracle(&x, &y, cfg.warp, ix)).abs();
    let (grad, skipped) = gradient_check(&x, &y, &cfg, FD_STEP, GRAD_FLOOR)?;
    Ok(Worst {
        oracle,
        hard,
        band,
        grad,
        skipped,
    })
}

fn dtw_check(a: &DtwCheckArgs, base: &SoftDtwConfig, seed: u64, exec: ExecPolicy) -> Result<i32> {
    if a.trials == 0 || a.max_len == 0 || a.max_dim == 0 {
        return Err(Error::Config(
            "trials, max-len and max-dim must be >= 1".into(),
        ));
    }
    let trials: Vec<usize> = (0..a.trials).collect();
    let results = exec.map(&trials, |_, &t| dtw_trial(seed, t, a, base));
    let mut worst = Worst::default();
    for r in results {
        let r = r?;
        worst.oracle = worst.oracle.max(r.oracle);
        worst.hard = worst.hard.max(r.hard);
        worst.band = worst.band.max(r.band);
        worst.grad = worst.grad.max(r.grad);
        worst.skipped += r.skipped;
    }
    let checks = [
        ("path-enumeration oracle", worst.oracle, 1e-10),
        ("hard limit (gamma 1e-4)", worst.hard, 1e-2),
        ("band consistency", worst.band, 1e-12),
        ("gradient vs finite differences", worst.grad, 1e-4),
    ];
    let mut ok = true;
    for (name, err, tol) in checks {
        let pass = err <= tol;
        ok &= pass;
        println!(
            "{} {name:<32} max err {err:.3e} (tol {tol:e})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} trials, lengths <= {}, {} gradient entries skipped at L1 kinks",
        a.trials, a.max_len, worst.skipped
    );
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad token id `{t}`")))
        })
        .collect()
}

fn parse_span(s: &str) -> Result<DurationSpan> {
    let bad = || Error::InvalidArgument(format!("span must be `start:end:factor`, got `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, f] = parts[..] else {
        return Err(bad());
    };
    Ok(DurationSpan {
        start: a.trim().parse().map_err(|_| bad())?,
        end: b.trim().parse().map_err(|_| bad())?,
        factor: f.trim().parse().map_err(|_| bad())?,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn matrix_csv<T: Real>(m: &Tensor<T>, decimals: usize, sep: &str) -> String {
    let cols = m.shape()[1];
    let mut s = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row
            .iter()
            .map(|x| format!("{:.*}", decimals, x.as_f64()))
            .collect();
        let _ = writeln!(s, "{}", cells.join(sep));
    }
    s
}

/// Binary greyscale image, one row per token and one column per frame.
fn attention_pgm<T: Real>(w: &Tensor<T>) -> Vec<u8> {
    let (t, k) = (w.shape()[0], w.shape()[1]);
    let mut out = format!("P5\n{t} {k}\n255\n").into_bytes();
    for tok in 0..k {
        for frame in 0..t {
            let v = (255.0 * w.at2(frame, tok).as_f64())
                .round()
                .clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

fn infer<T: Real>(a: &InferArgs, base: &ModelConfig) -> Result<i32> {
    let ids = parse_tokens(&a.tokens)?;
    let (model, store): (Model, ParameterStore<T>) = load_checkpoint(&a.checkpoint, base)?;
    let mut spans = a
        .span
        .iter()
        .map(|s| parse_span(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(f) = a.scale {
        spans.push(DurationSpan::global(ids.len(), f));
    }
    let out = model.infer(&store, &ids, &spans)?;
    let frames = out.spectrogram.shape()[0];
    debug_assert_eq!(frames, inferred_frame_count(&out.durations));

    write_file(
        &with_suffix(&a.out, ".spec.csv"),
        matrix_csv(&out.spectrogram, 6, ",").as_bytes(),
    )?;
    let mut durs = String::from("token,id,duration\n");
    for (i, (&id, d)) in ids.iter().zip(out.durations.data()).enumerate() {
        let _ = writeln!(durs, "{i},{id},{:.6}", d.as_f64());
    }
    write_file(&with_suffix(&a.out, ".durations.csv"), durs.as_bytes())?;
    if let Some(p) = &a.dump_align {
        let text_path = if p.extension().is_some_and(|e| e == "pgm") {
            p.with_extension("txt")
        } else {
            p.clone()
        };
        write_file(&text_path, matrix_csv(&out.attention, 6, " ").as_bytes())?;
        write_file(&p.with_extension("pgm"), &attention_pgm(&out.attention))?;
    }
    let total: f64 = out.durations.data().iter().map(|d| d.as_f64()).sum();
    println!("sum of durations {total:.6}");
    println!("frames {frames}");
    Ok(EXIT_OK)
}

fn eval<T: Real>(
    base: &ModelConfig,
    checkpoint: &Path,
    data: &Path,
    exec: ExecPolicy,
) -> Result<i32> {
    let (model, store): (Model, ParameterStore<T>) = load_checkpoint(checkpoint, base)?;
    let corpus = load_corpus(data)?;
    check_corpus(&model.cfg, &corpus)?;
    let (_, held) = split_held_out(&corpus);
    let report = evaluate_with(&model, &store, held, exec)?;
    println!("# {}", crate::model::EvalReport::CSV_HEADER);
    println!("{}", report.csv_line());
    Ok(EXIT_OK)
}
