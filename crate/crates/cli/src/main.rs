mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result, bail};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gaitmff::cycle::estimate_cycle;
use gaitmff::model::BranchMask;
use gaitmff::pipeline::checkpoint::write_tensors;
use gaitmff::pipeline::{
    AblationPlan, CHECKPOINT_VERSION, EvalOptions, Metric, Protocol, TABLE_MASKS, TrainError,
    ablation_suite, featurize_sequence, load_checkpoint, plan_windows, rank1_eval, save_checkpoint,
    split_gallery_probe, train_with,
};
use gaitmff::skeleton::{
    KEYPOINT_FORMAT_VERSION, PoseSequence, SkeletonTopology, load_directory, write_sequences,
};
use gaitmff::synth::{generate_dataset, write_manifest};

use config::CommandConfig;

#[derive(Parser, Debug)]
#[command(
    name = "gaitmff",
    about = "Skeleton gait recognition with multi-branch feature fusion"
)]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print the crate and file format versions.
    #[arg(short = 'V', long)]
    version: bool,
    /// TOML file with [synth], [train] and [eval] sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Embedding workers for evaluation. Training always runs on one thread.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic walker dataset with its manifest and gallery/probe split.
    Synth(SynthArgs),
    /// Print the detected gait cycle of every sequence.
    Cycles(CyclesArgs),
    /// Write the branch tensors of every window.
    Featurize(FeaturizeArgs),
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Rank-1 identification of a probe set against a gallery.
    Eval(EvalArgs),
    /// Train and evaluate every branch combination under several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// NM sequences per subject placed in the gallery split.
    #[arg(long)]
    gallery_nm: Option<usize>,
}

#[derive(Args, Debug)]
struct CyclesArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the loss history goes next to it as `*.losses.tsv`.
    #[arg(long)]
    out: PathBuf,
    /// Branches to train, e.g. `P+S+V` or `V`.
    #[arg(long, default_value = "P+S+V")]
    mask: BranchMask,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Also write `report.tsv` and `report.txt` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Branch combination to include; repeat for several. Defaults to all five table rows.
    #[arg(long = "mask")]
    masks: Vec<BranchMask>,
    #[arg(long)]
    gallery_nm: Option<usize>,
    /// Also write `ablation.tsv` and `ablation.txt` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "euclidean" => Ok(Metric::Euclidean),
        "cosine" => Ok(Metric::Cosine),
        other => Err(format!("unknown metric `{other}` (euclidean or cosine)")),
    }
}

/// Marks failures caused by the invocation itself.
#[derive(Debug)]
struct UsageError;

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("usage error")
    }
}

fn version_text() -> String {
    format!(
        "gaitmff {}\nkeypoint format {KEYPOINT_FORMAT_VERSION}\ncheckpoint format {CHECKPOINT_VERSION}",
        env!("CARGO_PKG_VERSION")
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    let non_finite = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<TrainError>(),
            Some(TrainError::NonFinite { .. })
        )
    });
    if non_finite { 3 } else { 2 }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.version {
        println!("{}", version_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(anyhow::anyhow!("no subcommand given; see --help").context(UsageError));
    };
    let mut cfg = CommandConfig::load(cli.config.as_deref()).context(UsageError)?;
    if let Some(threads) = cli.threads {
        cfg.eval.threads = threads;
    }
    match command {
        Command::Synth(args) => synth(cfg, args),
        Command::Cycles(args) => cycles(&cfg, &args),
        Command::Featurize(args) => featurize(&cfg, &args),
        Command::Train(args) => train_cmd(cfg, args),
        Command::Eval(args) => eval(cfg, &args),
        Command::Ablate(args) => ablate(cfg, args),
    }
}

fn load(dir: &Path) -> Result<Vec<PoseSequence>> {
    let seqs = load_directory(dir)
        .with_context(|| format!("cannot load sequences from {}", dir.display()))?;
    if seqs.is_empty() {
        bail!("no sequences found in {}", dir.display());
    }
    Ok(seqs)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_keypoints(path: &Path, seqs: &[PoseSequence]) -> Result<()> {
    let mut w = create(path)?;
    write_sequences(&mut w, seqs)?;
    w.flush()?;
    Ok(())
}

fn synth(mut cfg: CommandConfig, args: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.subjects = args.subjects.unwrap_or(s.subjects);
    s.seed = args.seed.unwrap_or(s.seed);
    s.frames = args.frames.unwrap_or(s.frames);
    s.noise_sigma = args.noise.unwrap_or(s.noise_sigma);
    let gallery_nm = args.gallery_nm.unwrap_or(cfg.eval.gallery_nm);
    s.validate().context(UsageError)?;

    let data = generate_dataset(&cfg.synth)?;
    let out = &args.out;
    write_keypoints(&out.join("keypoints.jsonl"), &data.sequences)?;
    let mut manifest = create(&out.join("manifest.tsv"))?;
    write_manifest(&mut manifest, &data.manifest)?;
    manifest.flush()?;
    let (gallery, probe) = split_gallery_probe(&data.sequences, gallery_nm);
    write_keypoints(&out.join("gallery").join("keypoints.jsonl"), &gallery)?;
    write_keypoints(&out.join("probe").join("keypoints.jsonl"), &probe)?;
    eprintln!(
        "wrote {} sequences ({} gallery, {} probe) to {}",
        data.sequences.len(),
        gallery.len(),
        probe.len(),
        out.display()
    );
    Ok(())
}

fn cycles(cfg: &CommandConfig, args: &CyclesArgs) -> Result<()> {
    let seqs = load(&args.data)?;
    let topo = SkeletonTopology::mpii();
    let mut table = String::from("subject_id\tsequence_id\thalf_cycle\tfull_cycle\ttroughs\n");
    for seq in &seqs {
        let (half, full, troughs) = match estimate_cycle(seq, &topo, &cfg.train.cycle) {
            Ok(est) => (
                est.half_cycle_frames.to_string(),
                est.full_cycle_frames.to_string(),
                est.trough_indices
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            Err(_) => ("NA".into(), "NA".into(), String::new()),
        };
        let _ = writeln!(
            table,
            "{}\t{}\t{half}\t{full}\t{troughs}",
            seq.subject_id, seq.sequence_id
        );
    }
    match &args.out {
        Some(path) => write_text(path, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn featurize(cfg: &CommandConfig, args: &FeaturizeArgs) -> Result<()> {
    let seqs = load(&args.data)?;
    let topo = SkeletonTopology::mpii();
    let plan = plan_windows(&seqs, cfg.train.window_policy, &topo, &cfg.train.cycle)?;
    let mut windows = 0;
    for seq in &seqs {
        let bundles = featurize_sequence::<f32>(seq, &plan, &topo)?;
        let mut tensors = Vec::with_capacity(3 * bundles.len());
        for (k, b) in bundles.into_iter().enumerate() {
            tensors.push((format!("window{k:03}.proportion"), b.proportion.data));
            tensors.push((format!("window{k:03}.skeletal"), b.skeletal.data));
            tensors.push((format!("window{k:03}.velocity"), b.velocity.data));
            windows += 1;
        }
        let path = args
            .out
            .join(format!("{}_{}.gmff", seq.subject_id, seq.sequence_id));
        let mut w = create(&path)?;
        write_tensors(&mut w, &tensors)?;
        w.flush()?;
    }
    eprintln!(
        "wrote {windows} windows of {} frames (stride {}) for {} sequences to {}",
        plan.window,
        plan.stride,
        seqs.len(),
        args.out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut CommandConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.seed = o.seed.unwrap_or(t.seed);
    t.learning_rate = o.lr.unwrap_or(t.learning_rate);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
}

fn train_cmd(mut cfg: CommandConfig, args: TrainArgs) -> Result<()> {
    apply_overrides(&mut cfg, &args.overrides);
    cfg.train.validate().context(UsageError)?;
    let seqs = load(&args.data)?;
    let outcome = train_with::<f64>(&seqs, &cfg.train, args.mask, |epoch, loss| {
        eprintln!("epoch {epoch:>3}  loss {loss:.6}");
    })?;
    save_checkpoint(&outcome.best, &args.out)?;
    let mut history = String::from("epoch\tloss\n");
    for (epoch, loss) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(history, "{}\t{loss:.9}", epoch + 1);
    }
    write_text(&args.out.with_extension("losses.tsv"), &history)?;
    eprintln!(
        "saved {} (windows of {} frames, stride {})",
        args.out.display(),
        outcome.plan.window,
        outcome.plan.stride
    );
    Ok(())
}

fn eval(mut cfg: CommandConfig, args: &EvalArgs) -> Result<()> {
    cfg.eval.metric = args.metric.unwrap_or(cfg.eval.metric);
    let ckpt = load_checkpoint(&args.ckpt)
        .with_context(|| format!("cannot load {}", args.ckpt.display()))?;
    let (gallery, probe) = (load(&args.gallery)?, load(&args.probe)?);
    let options = EvalOptions {
        metric: cfg.eval.metric,
        threads: cfg.eval.threads.max(1),
    };
    let report = rank1_eval(&ckpt, &gallery, &probe, &options)?;
    print!("{}", report.to_table());
    if let Some(dir) = &args.out {
        write_text(&dir.join("report.tsv"), &report.to_tsv())?;
        write_text(&dir.join("report.txt"), &report.to_table())?;
    }
    Ok(())
}

fn ablate(mut cfg: CommandConfig, args: AblateArgs) -> Result<()> {
    apply_overrides(&mut cfg, &args.overrides);
    cfg.train.validate().context(UsageError)?;
    let seqs = load(&args.data)?;
    let (gallery, probe) =
        split_gallery_probe(&seqs, args.gallery_nm.unwrap_or(cfg.eval.gallery_nm));
    let protocol = Protocol {
        train: gallery.clone(),
        gallery,
        probe,
    };
    let masks = if args.masks.is_empty() {
        TABLE_MASKS.to_vec()
    } else {
        args.masks
    };
    let eval = EvalOptions {
        metric: cfg.eval.metric,
        threads: cfg.eval.threads.max(1),
    };
    let plan = AblationPlan {
        config: &cfg.train,
        eval: &eval,
        masks: &masks,
        seeds: &args.seeds,
    };
    let table = ablation_suite(
        plan,
        |_| Ok::<_, std::convert::Infallible>(protocol.clone()),
        |mask, seed, report| {
            eprintln!(
                "{:<6} seed {seed}: rank-1 {:.4}",
                mask.label(),
                report.overall
            )
        },
    )?;
    print!("{}", table.to_table());
    if let Some(dir) = &args.out {
        write_text(&dir.join("ablation.tsv"), &table.to_tsv())?;
        write_text(&dir.join("ablation.txt"), &table.to_table())?;
    }
    Ok(())
}
