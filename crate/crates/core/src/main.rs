use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use actseg::checkpoint;
use actseg::config::{word_table, RunConfig};
use actseg::data::io::{read_mask, write_labels, write_mask, write_pfm};
use actseg::data::{generate, write_dataset, Dataset, Split};
use actseg::embeddings::EmbeddingTable;
use actseg::inference::{
    oracle_pair_scores, pair_inference, predict_all, Scorer, Segmenter, PAIR_THRESHOLD,
};
use actseg::loss::{GradCheckOptions, MaskPyramid};
use actseg::metrics::{aggregate, pair_eval};
use actseg::model::SegmentationModel;
use actseg::tensor::Volume;
use actseg::textenc::embed_sentence;
use actseg::trainer::{prepare, train, write_loss_log, TrainState};
use actseg::{Error, Result};

/// Sentence-conditioned actor and action segmentation on synthetic shape-world video.
#[derive(Parser)]
#[command(name = "actseg", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a shape-world dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Segment the actor a sentence refers to.
    Segment(SegmentArgs),
    /// Score predicted masks against a dataset.
    Eval(EvalArgs),
    /// Actor-action pair labelling with oracle pair scores.
    EvalPairs(EvalPairsArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training videos to render.
    #[arg(long)]
    count: usize,
    /// Test videos to render.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint up to the configured iteration count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Word-vector table (`word v1 .. vD` per line).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Print the loss every this many iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second-stream checkpoint, fused with the first.
    #[arg(long)]
    flow_checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Video id inside the dataset; required unless --split is given.
    #[arg(long, required_unless_present = "split")]
    video: Option<String>,
    #[arg(long, required_unless_present = "split")]
    sentence: Option<String>,
    /// Segment every annotated sample of a split into --out as a directory.
    #[arg(long, value_parser = parse_split, conflicts_with_all = ["video", "sentence"])]
    split: Option<Split>,
    /// Mask PGM, or a directory with --split.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-resolution response maps as PFM.
    #[arg(long)]
    dump_responses: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<video>_<instance>.pgm` masks.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPairsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    flow_checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for predicted label maps.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Entries probed per parameter block.
    #[arg(long, default_value_t = 6)]
    probes: usize,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train or test, got {s}")),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Input("--count must be positive".into()));
    }
    let cfg = run_config(a.config.as_deref())?;
    let m = write_dataset(&a.out, &cfg.world, a.count, a.test_count, a.force)?;
    println!(
        "wrote {} train and {} test videos to {}",
        m.train.len(),
        m.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(a.config.as_deref())?;
    let data = Dataset::open(&a.data)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("loss.csv");
    if ckpt.exists() && !a.force && a.resume.is_none() {
        return Err(Error::Input(format!(
            "{} exists; pass --force to overwrite",
            ckpt.display()
        )));
    }
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = checkpoint::load(p)?;
            if s.model.config != cfg.model {
                return Err(Error::Config(
                    "checkpoint model differs from the run config".into(),
                ));
            }
            s.config.iterations = cfg.train.iterations;
            s
        }
        None => TrainState::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let table = word_table(&state.model.config, &state.config, a.embeddings.as_deref())?;
    let samples = data.samples(Split::Train)?;
    let prepared = prepare(&samples, &state.model.config, &table, state.config.clip_len)?;
    eprintln!(
        "training on {} samples, {} parameters, iterations {}..{}",
        prepared.len(),
        state.model.parameter_count(),
        state.iteration,
        state.config.iterations
    );
    let every = a.log_every;
    let records = train(&mut state, &prepared, |r| {
        if every > 0 && (r.iteration + 1) % every == 0 {
            eprintln!(
                "iter {:>6}  lr {:.1e}  loss {:.5}",
                r.iteration + 1,
                r.lr,
                r.loss
            );
        }
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    checkpoint::save(&ckpt, &state)?;
    let append = a.resume.is_some() && log_path.exists();
    let f = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    write_loss_log(BufWriter::new(f), &records, !append)?;
    println!("saved {} at iteration {}", ckpt.display(), state.iteration);
    Ok(())
}

struct Loaded {
    state: TrainState,
    table: EmbeddingTable,
}

fn load_model(path: &Path, embeddings: Option<&Path>) -> Result<Loaded> {
    let state = checkpoint::load(path)?;
    let table = word_table(&state.model.config, &state.config, embeddings)?;
    Ok(Loaded { state, table })
}

fn segmenter(l: &Loaded) -> Segmenter<'_> {
    Segmenter {
        model: &l.state.model,
        table: &l.table,
        clip_len: l.state.config.clip_len,
    }
}

fn scorer<'a>(first: &'a Loaded, second: Option<&'a Loaded>, cfg: &RunConfig) -> Scorer<'a> {
    match second {
        Some(f) => Scorer::Fused {
            appearance: segmenter(first),
            flow: segmenter(f),
            weights: cfg.fusion,
        },
        None => Scorer::Single(segmenter(first)),
    }
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let cfg = run_config(a.config.as_deref())?;
    let first = load_model(&a.checkpoint, a.embeddings.as_deref())?;
    let second = a
        .flow_checkpoint
        .as_deref()
        .map(|p| load_model(p, a.embeddings.as_deref()))
        .transpose()?;
    let scorer = scorer(&first, second.as_ref(), &cfg);
    let data = Dataset::open(&a.data)?;

    if let Some(split) = a.split {
        let samples = data.samples(split)?;
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        let masks = predict_all(&scorer, &samples)?;
        for (s, (pred, _)) in samples.iter().zip(&masks) {
            write_mask(
                &a.out.join(format!("{}_{}.pgm", s.video_id, s.instance_id)),
                pred,
            )?;
        }
        println!("wrote {} masks to {}", masks.len(), a.out.display());
        return Ok(());
    }

    let (id, sentence) = (
        a.video.expect("clap enforces"),
        a.sentence.expect("clap enforces"),
    );
    let video = data.video(&id)?;
    let top = scorer.response(&sentence, &video)?;
    write_mask(&a.out, &actseg::decoder::predict_mask(&top))?;
    if let Some(dir) = &a.dump_responses {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut streams = vec![("", &first)];
        if let Some(f) = &second {
            streams = vec![("appearance_", &first), ("flow_", f)];
            write_pfm(&dir.join("fused.pfm"), &top)?;
        }
        for (prefix, l) in streams {
            let seg = segmenter(l);
            let clip = match l.state.model.config.stream {
                actseg::videoenc::StreamKind::Appearance => &video.appearance,
                actseg::videoenc::StreamKind::Flow => &video.flow,
            };
            for map in seg.responses(&sentence, clip, video.center)? {
                write_pfm(
                    &dir.join(format!("{prefix}response_{}.pfm", map.size)),
                    &map,
                )?;
            }
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(&a.pred_dir)
        .map_err(|e| Error::io(&a.pred_dir, e))?
        .map(|e| {
            e.map(|e| e.path())
                .map_err(|err| Error::io(&a.pred_dir, err))
        })
        .collect::<Result<Vec<_>>>()?;
    names.retain(|p| p.extension().is_some_and(|x| x == "pgm"));
    names.sort();
    if names.is_empty() {
        return Err(Error::Input(format!(
            "no .pgm masks in {}",
            a.pred_dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for p in &names {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (video, instance) = stem.rsplit_once('_').ok_or_else(|| {
            Error::Input(format!(
                "{} is not named <video>_<instance>.pgm",
                p.display()
            ))
        })?;
        let gt = read_mask(
            &a.gt_dir
                .join("videos")
                .join(video)
                .join(format!("mask_{instance}.pgm")),
        )?;
        pairs.push((read_mask(p)?, gt));
    }
    let report = aggregate(&pairs)?;
    print!("{}", report.to_table());
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    Ok(())
}

fn cmd_eval_pairs(a: EvalPairsArgs) -> Result<()> {
    let cfg = run_config(a.config.as_deref())?;
    let first = load_model(&a.checkpoint, a.embeddings.as_deref())?;
    let second = a
        .flow_checkpoint
        .as_deref()
        .map(|p| load_model(p, a.embeddings.as_deref()))
        .transpose()?;
    let scorer = scorer(&first, second.as_ref(), &cfg);
    let data = Dataset::open(&a.data)?;
    if let Some(dir) = &a.labels_out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut pairs = Vec::new();
    for id in data.manifest.ids(a.split) {
        let video = data.video(id)?;
        let pred = pair_inference(&scorer, &video, &oracle_pair_scores(&video), PAIR_THRESHOLD)?;
        if let Some(dir) = &a.labels_out {
            write_labels(&dir.join(format!("{id}.pgm")), &pred)?;
        }
        pairs.push((pred, video.pair_labels()));
    }
    let report = pair_eval(&pairs, actseg::data::Pair::COUNT)?;
    println!(
        "class-average {:.1}  global {:.1}  mean IoU {:.1}",
        100.0 * report.class_average_acc,
        100.0 * report.global_acc,
        100.0 * report.mean_class_iou
    );
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    Ok(())
}

/// Checks on a seeded uniform-noise clip. Rendered clips have black
/// background whose features have near-zero norm before normalization, where
/// a finite-difference step of 1e-3 is no longer small.
fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg = run_config(a.config.as_deref())?;
    let model = SegmentationModel::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let sample = generate(&cfg.world, Split::Train, 1)?.swap_remove(0);
    let table = word_table(&cfg.model, &cfg.train, None)?;
    let sentence = embed_sentence(&sample.sentence, &table, cfg.model.l_max)?;
    let r = cfg.model.canvas();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut clip = Volume::<f64>::zeros(cfg.train.clip_len, r, r, cfg.model.stream.channels());
    clip.data.iter_mut().for_each(|x| *x = rng.random());
    let target = MaskPyramid::from_mask(&sample.gt_mask, &cfg.model.resolutions)?;
    let weights = cfg.train.validate(&cfg.model)?;
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        probes_per_block: Some(a.probes),
        ..Default::default()
    };
    let report = model.gradient_check(&sentence, &clip, &target, &weights, opts)?;
    for b in &report.blocks {
        println!(
            "{:<28} {:>4} probes  max rel err {:.2e}  {}",
            b.name,
            b.checked,
            b.max_rel_error,
            if b.passed { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{}",
        if report.passed() {
            "all blocks pass"
        } else {
            "gradient check failed"
        }
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Segment(a) => cmd_segment(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::EvalPairs(a) => cmd_eval_pairs(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
