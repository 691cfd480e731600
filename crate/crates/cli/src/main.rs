//! Command-line front end: compress, decompress, train, bench, inspect,
//! and synthetic-corpus generation.
//!
//! Exit codes are stable: 0 success, 1 I/O, 2 usage (from clap), 4 parse
//! error, 5 weights-hash mismatch, 6 verify failure, 7 decode/truncation,
//! 8 invalid configuration or data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use rwic_core::codec::DepthMode;
use rwic_core::container::{compress_image, decompress_image, parse_header, CompressOptions};
use rwic_core::error::Error;
use rwic_core::nn::{ModelConfig, ModelWeights};
use rwic_core::raw::{read_raw_container, write_raw_container};
use rwic_core::train::corpus::{
    images_to_patches, load_corpus_dir, make_synthetic_corpus, CorpusSpec, SyntheticKind,
};
use rwic_core::train::{evaluate_bpp, train, EvalMode, TrainConfig};

const WEIGHTS_ENV: &str = "RWIC_WEIGHTS";

#[derive(Parser)]
#[command(name = "rwic", version, about = "Bit-depth adaptive lossless Bayer raw codec")]
struct Cli {
    /// Worker threads for patch-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Seed for the commands that draw randomness (train, synth).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Machine-parseable CSV output where applicable.
    #[arg(long, global = true)]
    machine: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a raw container (.braw) into a codec container (.rwic).
    Compress(CompressArgs),
    /// Decompress a codec container back to the original raw file.
    Decompress(DecompressArgs),
    /// Train weights on a directory of raw containers.
    Train(TrainArgs),
    /// Report true compressed bitrates over a corpus.
    Bench(BenchArgs),
    /// Print the header of a codec container.
    Inspect(InspectArgs),
    /// Generate a synthetic raw corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CompressArgs {
    input: PathBuf,
    output: PathBuf,
    /// Weights file (default: $RWIC_WEIGHTS).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Decode in-process after encoding and require bit equality.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    /// Force every patch to the image's maximum bit depth.
    #[arg(long)]
    fixed_depth: bool,
    /// Bit-depth handling: adaptive, fixed, or masked.
    #[arg(long, value_enum, default_value_t = DepthModeArg::Adaptive)]
    depth_mode: DepthModeArg,
    /// Store one bit depth per channel instead of per patch.
    #[arg(long)]
    per_channel_depths: bool,
}

#[derive(Args)]
struct DecompressArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .braw files.
    corpus: PathBuf,
    /// Output weights file.
    output: PathBuf,
    /// TOML file with [train] and [model] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    /// Where to write the per-epoch loss history CSV
    /// (default: <output>.history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of .braw files.
    corpus: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Evaluate with every patch forced to the corpus maximum depth.
    #[arg(long)]
    fixed_depth: bool,
    /// Evaluate the masked path: conditioning at the corpus maximum,
    /// support renormalized per patch.
    #[arg(long, conflicts_with = "fixed_depth")]
    masked_depth: bool,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
}

#[derive(Args)]
struct InspectArgs {
    input: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DepthModeArg {
    Adaptive,
    Fixed,
    Masked,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    Constant,
    Noise,
    Smooth,
    Correlated,
    Mixed,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for .braw files.
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = SynthKind::Smooth)]
    kind: SynthKind,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    bit_depth: u8,
    /// Second depth used by the mixed corpus.
    #[arg(long, default_value_t = 8)]
    low_bit_depth: u8,
    /// Shot-noise scale of the smooth generators.
    #[arg(long, default_value_t = 0.4)]
    shot_noise: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TrainFile {
    train: TrainConfig,
    model: ModelConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse(_) | Error::Structure(_) => 4,
        Error::HashMismatch { .. } => 5,
        Error::Truncated(_) | Error::Decode { .. } => 7,
        Error::Io(_) => 1,
        _ => 8,
    }
}

fn load_weights(flag: &Option<PathBuf>) -> Result<ModelWeights, Error> {
    let path = match flag {
        Some(p) => p.clone(),
        None => std::env::var_os(WEIGHTS_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!("no --weights given and {WEIGHTS_ENV} is unset"))
            })?,
    };
    ModelWeights::load(&path)
}

fn cmd_compress(args: &CompressArgs, machine: bool) -> Result<(), Error> {
    let weights = load_weights(&args.weights)?;
    let img = read_raw_container(&args.input)?;
    let mode = if args.fixed_depth || args.depth_mode == DepthModeArg::Fixed {
        let rggb = rwic_core::raw::pack_bayer(&img);
        let patches = rwic_core::raw::split_patches(&rggb, args.patch_size)?;
        let map = rwic_core::bitdepth::BitDepthMap::from_patches(&patches, false);
        DepthMode::Fixed(map.max_depth())
    } else if args.depth_mode == DepthModeArg::Masked {
        let rggb = rwic_core::raw::pack_bayer(&img);
        let patches = rwic_core::raw::split_patches(&rggb, args.patch_size)?;
        let map = rwic_core::bitdepth::BitDepthMap::from_patches(&patches, false);
        DepthMode::Masked(map.max_depth())
    } else {
        DepthMode::Adaptive
    };
    let opts = CompressOptions {
        patch_size: args.patch_size,
        mode,
        per_channel_depths: args.per_channel_depths,
    };
    let compressed = compress_image(&img, &weights, &opts)?;
    if args.verify {
        let back = decompress_image(&compressed.bytes, &weights)?;
        if back != img {
            return Err(Error::Decode {
                patch: usize::MAX,
                reason: "verification decode differs from input".into(),
            });
        }
    }
    std::fs::write(&args.output, &compressed.bytes)?;
    let b = &compressed.breakdown;
    if machine {
        println!("pixels,pixel_bits,latent_bits,side_info_bits,header_bits,total_bits,bpp");
        println!(
            "{},{},{},{},{},{},{:.6}",
            b.pixel_count,
            b.pixel_bits,
            b.latent_bits,
            b.side_info_bits,
            b.header_bits,
            b.total_bits(),
            b.bpp()
        );
    } else {
        println!(
            "{} -> {} ({} bytes, {:.4} bpp)",
            args.input.display(),
            args.output.display(),
            b.total_bits() / 8,
            b.bpp()
        );
        println!(
            "  pixel {:.4} bpp | latent {:.4} bpp | side-info {:.4} bpp | header {:.4} bpp",
            b.pixel_bits as f64 / b.pixel_count as f64,
            b.latent_bits as f64 / b.pixel_count as f64,
            b.side_info_bits as f64 / b.pixel_count as f64,
            b.header_bits as f64 / b.pixel_count as f64,
        );
        if args.verify {
            println!("  verified: decode is bit-exact");
        }
    }
    Ok(())
}

fn cmd_decompress(args: &DecompressArgs) -> Result<(), Error> {
    let weights = load_weights(&args.weights)?;
    let bytes = std::fs::read(&args.input)?;
    let img = decompress_image(&bytes, &weights)?;
    write_raw_container(&img, &args.output)?;
    println!(
        "{} -> {} ({}x{} {} {}-bit)",
        args.input.display(),
        args.output.display(),
        img.width(),
        img.height(),
        img.pattern().name(),
        img.container_bit_depth()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<(), Error> {
    let mut file: TrainFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Parse(format!("train config: {e}")))?
        }
        None => TrainFile::default(),
    };
    if file.train.seed == 0 {
        file.train.seed = seed;
    }
    let images = load_corpus_dir(&args.corpus)?;
    if images.is_empty() {
        return Err(Error::Config(format!(
            "no .braw files in {}",
            args.corpus.display()
        )));
    }
    let patches = images_to_patches(&images, args.patch_size)?;
    println!(
        "training on {} patches from {} images (seed {})",
        patches.len(),
        images.len(),
        file.train.seed
    );
    let outcome = train(&patches, &file.train, file.model)?;
    outcome.weights.save(&args.output)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.output.with_extension("history.csv"));
    let mut csv = String::from("epoch,train_bits_per_pixel,val_bits_per_pixel,learning_rate\n");
    for (i, ((t, v), lr)) in outcome
        .train_history
        .iter()
        .zip(&outcome.val_history)
        .zip(&outcome.lr_history)
        .enumerate()
    {
        csv.push_str(&format!("{i},{t:.6},{v:.6},{lr:.3e}\n"));
    }
    std::fs::write(&history_path, csv)?;
    println!(
        "weights -> {} (hash {}), history -> {}",
        args.output.display(),
        rwic_core::container::hex(&outcome.weights.content_hash())[..16].to_string(),
        history_path.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs, machine: bool) -> Result<(), Error> {
    let weights = load_weights(&args.weights)?;
    let images = load_corpus_dir(&args.corpus)?;
    if images.is_empty() {
        return Err(Error::Config(format!(
            "no .braw files in {}",
            args.corpus.display()
        )));
    }
    let mode = if args.fixed_depth {
        EvalMode::FixedMax
    } else if args.masked_depth {
        EvalMode::MaskedMax
    } else {
        EvalMode::Adaptive
    };
    let report = evaluate_bpp(&images, &weights, args.patch_size, mode)?;
    if machine {
        print!("{}", report.to_csv());
    } else {
        println!(
            "mode: {:?}   mean patch depth: {:.2}",
            report.mode, report.mean_patch_depth
        );
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), Error> {
    let bytes = std::fs::read(&args.input)?;
    let header = parse_header(&bytes)?;
    println!("magic=RWIC version=1");
    println!("width={}", header.width);
    println!("height={}", header.height);
    println!("pattern={}", header.pattern.name());
    println!("container_bit_depth={}", header.container_bit_depth);
    println!("patch_size={}", header.patch_size);
    let (mode, cond) = header.mode.code();
    println!(
        "depth_mode={}",
        match mode {
            0 => "adaptive".to_string(),
            1 => format!("fixed({cond})"),
            _ => format!("masked({cond})"),
        }
    );
    println!(
        "weights_hash={}",
        rwic_core::container::hex(&header.weights_hash)
    );
    println!("patch_count={}", header.patch_count());
    println!("file_bytes={}", bytes.len());
    let depths: Vec<String> = (0..header.patch_count().min(16))
        .map(|i| header.depth_map.patch_depth(i).to_string())
        .collect();
    println!("patch_depths[..16]={}", depths.join(","));
    Ok(())
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<(), Error> {
    let specs: Vec<CorpusSpec> = match args.kind {
        SynthKind::Constant => vec![CorpusSpec {
            kind: SyntheticKind::Constant {
                value: ((1u32 << args.bit_depth) - 1) as u16 / 2,
            },
            count: args.count,
            width: args.width,
            height: args.height,
        }],
        SynthKind::Noise => vec![CorpusSpec {
            kind: SyntheticKind::UniformNoise {
                bit_depth: args.bit_depth,
            },
            count: args.count,
            width: args.width,
            height: args.height,
        }],
        SynthKind::Smooth => vec![CorpusSpec {
            kind: SyntheticKind::SmoothGradient {
                bit_depth: args.bit_depth,
                shot_noise: args.shot_noise,
            },
            count: args.count,
            width: args.width,
            height: args.height,
        }],
        SynthKind::Correlated => vec![CorpusSpec {
            kind: SyntheticKind::Correlated {
                bit_depth: args.bit_depth,
                coupling: 0.9,
                noise: 0.02,
            },
            count: args.count,
            width: args.width,
            height: args.height,
        }],
        SynthKind::Mixed => vec![
            CorpusSpec {
                kind: SyntheticKind::SmoothGradient {
                    bit_depth: args.low_bit_depth,
                    shot_noise: args.shot_noise,
                },
                count: args.count.div_ceil(2),
                width: args.width,
                height: args.height,
            },
            CorpusSpec {
                kind: SyntheticKind::SmoothGradient {
                    bit_depth: args.bit_depth,
                    shot_noise: args.shot_noise,
                },
                count: args.count / 2,
                width: args.width,
                height: args.height,
            },
        ],
    };
    std::fs::create_dir_all(&args.output)?;
    let images = make_synthetic_corpus(&specs, seed);
    for (i, img) in images.iter().enumerate() {
        let path = args.output.join(format!("synth_{i:04}.braw"));
        write_raw_container(img, &path)?;
    }
    println!("wrote {} images to {}", images.len(), args.output.display());
    Ok(())
}

fn init_rayon(jobs: Option<usize>) {
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_rayon(cli.jobs);
    let result = match &cli.command {
        Command::Compress(args) => cmd_compress(args, cli.machine),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Bench(args) => cmd_bench(args, cli.machine),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Synth(args) => cmd_synth(args, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // Verification failure gets its own code.
            let code = if matches!(
                (&cli.command, &err),
                (Command::Compress(a), Error::Decode { .. }) if a.verify
            ) {
                6
            } else {
                exit_code_for(&err)
            };
            ExitCode::from(code)
        }
    }
}
