//! Command-line front end: training, compression, evaluation and analyses.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idf::analysis::{
    agreement_sweep, default_epsilons, estimator_matrix_run, landscape_grid, landscape_pca,
    landscape_range, toy_model_config, toy_pmf, toy_train_config, train_toy, write_agreement_csv,
    write_estimator_csv, write_landscape_csv, EstimatorCombo,
};
use idf::autodiff::rounding::{BackwardRounding, ForwardRounding, RoundingConfig};
use idf::config::RunConfig;
use idf::data::{read_raw, synth8x8, write_raw};
use idf::flows::{
    build_flatten_flow, entropy_bits, factorization_gap, flatten_bpd, load_model, pushforward,
    save_model, verify_bijection, FlowModel, Mode,
};
use idf::rans::{compress, decompress, CompressedStream, CompressionReport};
use idf::train::{evaluate_bpd, Trainer};
use idf::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(
    name = "idf",
    version,
    about = "Integer discrete flows for lossless compression"
)]
struct Cli {
    /// Seed override (also `IDF_SEED`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the config's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compress raw images with a trained model.
    Compress(CodecArgs),
    /// Restore raw images from a compressed stream.
    Decompress(CodecArgs),
    /// Report the model's NLL in bits per dimension on raw images.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Build the flattening flow for a finite domain and check it.
    FlattenDemo {
        /// Classes per dimension, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,2")]
        counts: Vec<i64>,
        #[arg(long, value_enum, default_value_t = PmfSource::Toy)]
        pmf: PmfSource,
    },
    /// Toy-model diagnostics written as CSV.
    Analyze(AnalyzeArgs),
    /// Write synth8x8 images to a raw image file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
}

#[derive(Args, Debug)]
struct CodecArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PmfSource {
    /// The two-bit toy table on the first two classes of each axis.
    Toy,
    Uniform,
    /// Seeded random masses.
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Analysis {
    Gradients,
    Landscape,
    Estimators,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: Analysis,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Toy bit depth.
    #[arg(long, default_value_t = 8)]
    bits: u32,
    /// Training iterations before the analysis.
    #[arg(long, default_value_t = 3000)]
    iterations: usize,
    /// Analyse the continuous counterpart instead of the discrete model.
    #[arg(long)]
    continuous: bool,
    /// Batches per epsilon for gradient agreement.
    #[arg(long, default_value_t = 10)]
    batches: usize,
    /// Grid points per axis for the landscape.
    #[arg(long, default_value_t = 21)]
    resolution: usize,
    /// Seeds per combination for the estimator matrix.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) => 2,
        Error::Format(_) | Error::Corruption(_) | Error::ModelMismatch(_) | Error::Io(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

/// `--seed`, then `IDF_SEED`.
fn seed_override(cli: Option<u64>) -> Result<Option<u64>, Error> {
    if cli.is_some() {
        return Ok(cli);
    }
    match std::env::var("IDF_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("IDF_SEED: not an integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Thread count from `IDF_THREADS`; computation is single-threaded, so
/// values other than 1 are accepted but only echoed.
fn threads() -> Result<usize, Error> {
    match std::env::var("IDF_THREADS") {
        Ok(v) => match v.trim().parse() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "IDF_THREADS: not a positive integer: `{v}`"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = seed_override(cli.seed)?;
    let threads = threads()?;
    println!("# threads = {threads}");
    match cli.command {
        Command::Train { config, out } => train(&config, out, seed),
        Command::Compress(a) => cmd_compress(&a),
        Command::Decompress(a) => cmd_decompress(&a),
        Command::Eval { model, input } => {
            println!(
                "# command = eval, model = {}, in = {}",
                model.display(),
                input.display()
            );
            let model = load_model(&model)?;
            let x = read_raw(&input)?;
            let bpd = evaluate_bpd(&model, &x, 64)?;
            println!("images {} nll_bpd {bpd:.6}", x.batch());
            Ok(())
        }
        Command::FlattenDemo { counts, pmf } => flatten_demo(&counts, pmf, seed.unwrap_or(0)),
        Command::Analyze(a) => analyze(&a, seed.unwrap_or(0)),
        Command::Synth { out, count } => {
            let seed = seed.unwrap_or(0);
            println!(
                "# command = synth, out = {}, count = {count}, seed = {seed}",
                out.display()
            );
            write_raw(&out, &synth8x8(count, seed)?)?;
            println!("wrote {count} images");
            Ok(())
        }
    }
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.optimizer.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    println!("# effective config\n{}", cfg.to_toml_string()?);
    let (train, valid) = cfg.load_data()?;
    println!(
        "# data: {} training, {} validation images",
        train.batch(),
        valid.as_ref().map_or(0, |v| v.batch())
    );
    for &s in &cfg.optimizer.seeds {
        let dir = cfg.output.dir.join(format!("seed{s}"));
        std::fs::create_dir_all(&dir)?;
        let model = FlowModel::new(cfg.model_config(s)?)?;
        let mut trainer = Trainer::new(model, cfg.train_config(s))?
            .with_metrics(dir.join("metrics.csv"))
            .with_checkpoints(dir.join("checkpoint"));
        let records = trainer.fit(&train, valid.as_ref())?;
        let final_model = trainer.eval_model();
        save_model(&final_model, &dir.join("model.idfm"))?;
        if let Some(r) = records.last() {
            let v = r.valid_bpd.map_or("-".to_string(), |v| format!("{v:.6}"));
            println!(
                "seed {s} epochs {} train_bpd {:.6} valid_bpd {v}",
                records.len(),
                r.train_bpd
            );
        }
        println!("seed {s} model {}", dir.join("model.idfm").display());
    }
    Ok(())
}

fn cmd_compress(a: &CodecArgs) -> Result<(), Error> {
    println!(
        "# command = compress, model = {}, in = {}, out = {}",
        a.model.display(),
        a.input.display(),
        a.out.display()
    );
    let model = load_model(&a.model)?;
    let x = read_raw(&a.input)?;
    if x.bits() != model.bits() {
        return Err(Error::Config(format!(
            "image has {} bits, model expects {}",
            x.bits(),
            model.bits()
        )));
    }
    let stream = compress(&model, &x)?;
    std::fs::write(&a.out, stream.to_bytes()?)?;
    let report = CompressionReport::new(&stream)?;
    let nll = evaluate_bpd(&model, &x, 64)?;
    println!(
        "images {} bpd {:.4} ({:.4}) file_bpd {:.4} escapes {}",
        report.images, report.coded_bpd, nll, report.file_bpd, report.escapes
    );
    Ok(())
}

fn cmd_decompress(a: &CodecArgs) -> Result<(), Error> {
    println!(
        "# command = decompress, model = {}, in = {}, out = {}",
        a.model.display(),
        a.input.display(),
        a.out.display()
    );
    let model = load_model(&a.model)?;
    let stream = CompressedStream::from_bytes(&std::fs::read(&a.input)?)?;
    let x = decompress(&model, &stream)?;
    write_raw(&a.out, &x)?;
    println!("images {} restored", x.batch());
    Ok(())
}

fn flatten_demo(counts: &[i64], source: PmfSource, seed: u64) -> Result<(), Error> {
    println!("# command = flatten-demo, counts = {counts:?}, pmf = {source:?}, seed = {seed}");
    let flow = build_flatten_flow(counts)?;
    let points = flow.support()?;
    let masses: Vec<f64> = match source {
        PmfSource::Toy => {
            if counts.len() != 2 || counts.iter().any(|&k| k < 2) {
                return Err(Error::Usage(
                    "the toy table needs two dimensions with at least two classes".into(),
                ));
            }
            let table = toy_pmf(1)?;
            points
                .iter()
                .map(|x| {
                    if x[0] < 2 && x[1] < 2 {
                        table.prob(x[0] as usize, x[1] as usize)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        PmfSource::Uniform => vec![1.0 / points.len() as f64; points.len()],
        PmfSource::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = points.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / z).collect()
        }
    };
    let pmf: Vec<(Vec<i64>, f64)> = points.into_iter().zip(masses).collect();
    let report = verify_bijection(&flow)?;
    println!(
        "bijection verified on {} points; image range {:?}..={:?}",
        report.points, report.image_min, report.image_max
    );
    let pushed = pushforward(&flow, &pmf)?;
    if counts.len() == 2 {
        let side = flow.support_size().unwrap_or(0) as i64;
        println!(
            "image distribution p(y1, y2), rows y1, columns y2, on {{0..{}}}^2:",
            side - 1
        );
        for y1 in 0..side {
            let row: Vec<String> = (0..side)
                .map(|y2| {
                    let p = pushed
                        .iter()
                        .filter(|(y, _)| y[0] == y1 && y[1] == y2)
                        .fold(0.0, |a, (_, q)| a + q);
                    format!("{p:.4}")
                })
                .collect();
            println!("  {}", row.join(" "));
        }
    } else {
        for (y, q) in pushed.iter().filter(|(_, q)| *q > 0.0) {
            println!("  {y:?} {q:.6}");
        }
    }
    let gap = factorization_gap(&pushed);
    println!(
        "rank one: {} (max |p - outer product of marginals| = {gap:.3e})",
        gap < 1e-12
    );
    let d = counts.len() as f64;
    println!(
        "flatten_bpd {:.12} entropy/d {:.12}",
        flatten_bpd(&flow, &pmf)?,
        entropy_bits(&pmf) / d
    );
    Ok(())
}

fn analyze(a: &AnalyzeArgs, seed: u64) -> Result<(), Error> {
    println!("# command = analyze, {a:?}, seed = {seed}");
    std::fs::create_dir_all(&a.out)?;
    let toy = toy_pmf(a.bits)?;
    let (mode, rounding) = if a.continuous {
        (Mode::Continuous, RoundingConfig::CONTINUOUS)
    } else {
        (Mode::Discrete, RoundingConfig::STRAIGHT_THROUGH)
    };
    match a.kind {
        Analysis::Gradients => {
            let model = FlowModel::new(toy_model_config(a.bits, mode, rounding, seed))?;
            let run = train_toy(&toy, model, toy_train_config(seed), a.iterations, 0)?;
            let eps = default_epsilons();
            let sweep = agreement_sweep(&run.model, &toy, &eps, a.batches, 128, seed)?;
            let path = a.out.join("agreement.csv");
            let note = format!(
                "bits={} iterations={} mode={mode:?} epsilon grid: default, 8 log-spaced points in [1e-4, 1e-1]",
                a.bits, a.iterations
            );
            write_agreement_csv(&path, &sweep, &note)?;
            for s in &sweep.summary {
                println!(
                    "epsilon {:.3e} mean_cosine {:.4} std {:.4} batches {}",
                    s.epsilon, s.mean, s.std, s.used
                );
            }
            println!("wrote {}", path.display());
        }
        Analysis::Landscape => {
            let model = FlowModel::new(toy_model_config(a.bits, mode, rounding, seed))?;
            let every = (a.iterations / 20).max(1);
            let run = train_toy(&toy, model, toy_train_config(seed), a.iterations, every)?;
            let thetas: Vec<Vec<f64>> = run.snapshots.iter().map(|(_, t)| t.clone()).collect();
            let (t1, t2) = landscape_pca(&thetas)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2d);
            let batch = toy.sample(512, &mut rng)?;
            let r = landscape_range(&thetas, &t1, &t2)?;
            let grid = landscape_grid(
                &run.model,
                &t1,
                &t2,
                (-r, r),
                (-r, r),
                a.resolution,
                &batch,
                &run.snapshots,
            )?;
            let (g, t) = (a.out.join("landscape.csv"), a.out.join("trajectory.csv"));
            write_landscape_csv(&g, &t, &grid)?;
            println!(
                "grid {}x{} range ±{r:.4} max/median neighbour jump {:.2}",
                a.resolution,
                a.resolution,
                grid.jump_ratio()
            );
            println!("wrote {} and {}", g.display(), t.display());
        }
        Analysis::Estimators => {
            let combos = default_combos();
            let seeds: Vec<u64> = (seed..seed + a.seeds).collect();
            let rows = estimator_matrix_run(&toy, &combos, &seeds, a.iterations)?;
            let path = a.out.join("estimators.csv");
            write_estimator_csv(&path, &rows)?;
            for r in &rows {
                let (f, b) = r.combo.label();
                println!(
                    "{:?} forward {f} backward {b} seed {} bpd {:.6}",
                    r.combo.mode, r.seed, r.bpd
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Rounding estimators compared on the toy problem.
fn default_combos() -> Vec<EstimatorCombo> {
    let d = |forward, backward| EstimatorCombo {
        mode: Mode::Discrete,
        rounding: RoundingConfig { forward, backward },
    };
    vec![
        d(ForwardRounding::HardRound, BackwardRounding::Identity),
        d(
            ForwardRounding::HardRound,
            BackwardRounding::SoftRoundDerivative { temperature: 1.0 },
        ),
        d(
            ForwardRounding::HardRound,
            BackwardRounding::SoftRoundDerivative { temperature: 0.5 },
        ),
        d(
            ForwardRounding::SoftRound { temperature: 0.5 },
            BackwardRounding::SoftRoundDerivative { temperature: 0.5 },
        ),
        d(ForwardRounding::Stochastic, BackwardRounding::Identity),
        EstimatorCombo {
            mode: Mode::Continuous,
            rounding: RoundingConfig::CONTINUOUS,
        },
        EstimatorCombo {
            mode: Mode::Continuous,
            rounding: RoundingConfig::STRAIGHT_THROUGH,
        },
    ]
}
