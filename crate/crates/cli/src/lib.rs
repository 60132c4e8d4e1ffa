//! `acenet` subcommands.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use acenet_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use acenet_core::data::image::{load_image, load_labels, load_mask, save_image, save_labels, save_mask, save_rgb};
use acenet_core::data::manifest::{DatasetManifest, ManifestEntry, Split};
use acenet_core::data::synth::{synth_membranes, synth_vessels, DEFAULT_BRANCHES, DEFAULT_CELLS};
use acenet_core::graph::{describe, full_graph_check, Network, NetworkConfig};
use acenet_core::metrics::{auc, instances, overlay, pixel_metrics, vrand, VesselReport};
use acenet_core::tensor::gradcheck::primitive_suite;
use acenet_core::tensor::{LabelMap, Shape, Tensor};
use acenet_core::training::{ablation_table, predict_probabilities, run_ablation, Trainer};
use acenet_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

pub use config::{RunConfig, TrainSection};

#[derive(Parser, Debug)]
#[command(name = "acenet", version, about = "ACE-Net segmentation: train, infer, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment one image with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Probability map path; the mask goes next to it as `<stem>_mask.png`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Field-of-view masks (vessel mode), matched by file stem.
        #[arg(long)]
        fov: Option<PathBuf>,
        /// Images drawn under the overlays (vessel mode).
        #[arg(long)]
        images: Option<PathBuf>,
        /// Overlay directory (vessel mode); defaults to `<pred>/overlay`.
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
    },
    /// Train and score the ten ablation configurations on synthetic membranes.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Print the block table of a network.
    Describe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Em,
    Vessel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Membranes,
    Vessels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 on success, 1 for usage and configuration errors, 2 for runtime
/// failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Infer { checkpoint, image, out } => cmd_infer(&checkpoint, &image, &out),
        Command::Eval {
            pred,
            gt,
            mode,
            fov,
            images,
            overlay_dir,
            threshold,
        } => {
            let report = match mode {
                EvalMode::Em => eval_em(&pred, &gt)?,
                EvalMode::Vessel => {
                    let overlays = overlay_dir.unwrap_or_else(|| pred.join("overlay"));
                    eval_vessel(&pred, &gt, fov.as_deref(), images.as_deref(), &overlays, threshold)?
                }
            };
            print!("{report}");
            Ok(0)
        }
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Synth {
            kind,
            out,
            count,
            height,
            width,
            seed,
            split,
        } => cmd_synth(kind, &out, count, height, width, seed, split),
        Command::Describe { config, height, width } => {
            let net_cfg = match config {
                Some(p) => load_config(&p)?.network,
                None => NetworkConfig::default(),
            };
            let net = Network::<f32>::new(net_cfg, 0)?;
            print!("{}", describe(&net, height, width)?);
            Ok(0)
        }
    }
}

/// Any failure to read or parse the run config is a configuration error.
fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(vec![other.to_string()]),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(config_path: &Path) -> Result<i32> {
    let cfg = load_config(config_path)?;
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config(vec!["`dataset` is required for train".into()]))?;
    // Everything that can fail on input happens before the output
    // directory is touched.
    let manifest = DatasetManifest::load(&dataset)?;
    if manifest.channels != cfg.network.in_channels {
        return Err(Error::Config(vec![format!(
            "dataset has {} channels, network expects in_channels = {}",
            manifest.channels, cfg.network.in_channels
        )]));
    }
    let samples = manifest.load_samples(cfg.network.num_classes)?;
    let net = Network::new(cfg.network.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.train_config(), cfg.loss)?;

    let out = cfg.output_dir.clone();
    let resolved = cfg.to_toml();
    println!("{resolved}");
    write_file(&out.join("config.toml"), &resolved)?;
    let trace_path = out.join("loss_trace.tsv");
    let mut trace = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let every = cfg.train.checkpoint_every;
    trainer.run(&samples, |t, b| {
        writeln!(trace, "{}", b.trace_line(t.step)).map_err(|e| Error::io(&trace_path, e))?;
        if every > 0 && t.step % every == 0 && t.step < t.config.steps {
            save_checkpoint(out.join(format!("ckpt_{:06}.ckpt", t.step)), &t.net, &t.opt, t.step as u64)?;
        }
        Ok(())
    })?;
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;
    save_checkpoint(out.join("final.ckpt"), &trainer.net, &trainer.opt, trainer.step as u64)?;
    match trainer.trace.last() {
        Some(b) => println!("trained {} steps, final loss {}", trainer.step, b.total),
        None => println!("trained 0 steps"),
    }
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(0)
}

fn mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_mask.png"))
}

/// Foreground probability: class 1 for two classes, else `1 - p(class 0)`.
fn foreground(probs: &Tensor<f32>) -> Tensor<f32> {
    let s = probs.shape();
    let plane = s.plane();
    let d = probs.data();
    let fg: Vec<f32> = if s.c() == 2 {
        d[plane..2 * plane].to_vec()
    } else {
        d[..plane].iter().map(|p| 1.0 - p).collect()
    };
    Tensor::new(Shape::new(1, 1, s.h(), s.w()), fg).expect("one plane")
}

pub fn cmd_infer(checkpoint: &Path, image: &Path, out: &Path) -> Result<i32> {
    let (net, _, _) = load_checkpoint::<f32>(checkpoint)?;
    let img = load_image(image)?;
    let want = net.config().in_channels;
    if img.shape().c() != want {
        return Err(Error::Data(format!(
            "{}: {} channels, checkpoint expects {want}",
            image.display(),
            img.shape().c()
        )));
    }
    let probs = predict_probabilities(&net, &img)?;
    let fg = foreground(&probs);
    save_image(&fg, out)?;
    let s = probs.shape();
    let classes = net.config().num_classes;
    let mask = if classes == 2 {
        LabelMap::new(1, s.h(), s.w(), fg.data().iter().map(|&p| (p >= 0.5) as u32).collect())?
    } else {
        let plane = s.plane();
        let labels = (0..plane)
            .map(|p| {
                (0..classes)
                    .max_by(|&a, &b| probs.data()[a * plane + p].total_cmp(&probs.data()[b * plane + p]).then(b.cmp(&a)))
                    .unwrap_or(0) as u32
            })
            .collect();
        LabelMap::new(1, s.h(), s.w(), labels)?
    };
    let mpath = mask_path(out);
    save_labels(&mask, classes, &mpath)?;
    println!("wrote {} and {}", out.display(), mpath.display());
    Ok(0)
}

/// PNG files of `dir` keyed by stem with any `_mask` suffix removed. When
/// both `x.png` and `x_mask.png` exist, `prefer_mask` picks which one wins.
fn png_files(dir: &Path, prefer_mask: bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut plain = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match stem.strip_suffix("_mask") {
            Some(key) => masks.insert(key.to_string(), path),
            None => plain.insert(stem, path),
        };
    }
    let (first, second) = if prefer_mask { (masks, plain) } else { (plain, masks) };
    let mut out = second;
    out.extend(first);
    Ok(out)
}

/// Pairs prediction and ground-truth files, failing with every unmatched id.
fn pair_files(pred: &Path, gt: &Path, prefer_mask: bool) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let p = png_files(pred, prefer_mask)?;
    let g = png_files(gt, true)?;
    let missing_pred: Vec<_> = g.keys().filter(|k| !p.contains_key(*k)).cloned().collect();
    let missing_gt: Vec<_> = p.keys().filter(|k| !g.contains_key(*k)).cloned().collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let mut msg = String::from("unmatched files:");
        if !missing_pred.is_empty() {
            let _ = write!(msg, " no prediction for [{}]", missing_pred.join(", "));
        }
        if !missing_gt.is_empty() {
            let _ = write!(msg, " no ground truth for [{}]", missing_gt.join(", "));
        }
        return Err(Error::Data(msg));
    }
    if g.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", gt.display())));
    }
    Ok(g.into_iter().map(|(k, gpath)| (k.clone(), p[&k].clone(), gpath)).collect())
}

fn same_size(id: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("`{id}`: prediction is {}x{}, ground truth {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Membrane mode: cells are the 4-connected interior regions of both maps.
pub fn eval_em(pred: &Path, gt: &Path) -> Result<String> {
    let mut out = String::new();
    let mut sum = 0.0;
    let pairs = pair_files(pred, gt, true)?;
    for (id, p, g) in &pairs {
        let pm = load_labels(p, 2)?;
        let gm = load_labels(g, 2)?;
        same_size(id, (pm.h, pm.w), (gm.h, gm.w))?;
        let score = vrand(&instances(&pm.data, pm.h, pm.w), &instances(&gm.data, gm.h, gm.w))?;
        sum += score;
        let _ = writeln!(out, "{id}\tvrand={score:.6}");
    }
    let _ = writeln!(out, "mean vrand {:.6}", sum / pairs.len() as f64);
    Ok(out)
}

pub fn eval_vessel(
    pred: &Path,
    gt: &Path,
    fov_dir: Option<&Path>,
    images: Option<&Path>,
    overlay_dir: &Path,
    threshold: f32,
) -> Result<String> {
    let pairs = pair_files(pred, gt, false)?;
    let mut out = String::new();
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (id, p, g) in &pairs {
        let prob = load_image(p)?;
        if prob.shape().c() != 1 {
            return Err(Error::Data(format!("`{id}`: probability map must be grayscale")));
        }
        let (h, w) = (prob.shape().h(), prob.shape().w());
        let (gh, gw, truth) = load_mask(g)?;
        same_size(id, (h, w), (gh, gw))?;
        let fov = match fov_dir {
            Some(dir) => {
                let path = dir.join(format!("{id}.png"));
                let (fh, fw, m) = load_mask(&path)?;
                same_size(id, (h, w), (fh, fw))?;
                Some(m)
            }
            None => None,
        };
        let metrics = pixel_metrics(prob.data(), &truth, fov.as_deref(), threshold)?;
        let report = VesselReport {
            metrics,
            auc: auc(prob.data(), &truth, fov.as_deref()).ok(),
        };
        let _ = writeln!(out, "{id}\t{}", report.key_values());
        let values = [
            report.metrics.sensitivity,
            report.metrics.specificity,
            Some(report.metrics.accuracy),
            report.auc,
        ];
        for (k, v) in values.iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
        let base = match images {
            Some(dir) => {
                let img = load_image(dir.join(format!("{id}.png")))?;
                same_size(id, (h, w), (img.shape().h(), img.shape().w()))?;
                let plane = img.shape().plane();
                let c = img.shape().c();
                (0..plane).map(|i| (0..c).map(|k| img.data()[k * plane + i]).sum::<f32>() / c as f32).collect()
            }
            None => vec![0.0; h * w],
        };
        let predicted: Vec<bool> = prob.data().iter().map(|&v| v >= threshold).collect();
        let pixels = overlay(&predicted, &truth, &base, fov.as_deref())?;
        save_rgb(&pixels, h, w, overlay_dir.join(format!("{id}.png")))?;
    }
    let names = ["sensitivity", "specificity", "accuracy", "auc"];
    for (k, name) in names.iter().enumerate() {
        let mean = if counts[k] > 0 {
            format!("{:.6}", sums[k] / counts[k] as f64)
        } else {
            "undefined".to_string()
        };
        let _ = writeln!(out, "{name:<12} {mean}");
    }
    Ok(out)
}

pub fn cmd_ablate(config_path: &Path) -> Result<i32> {
    let cfg = load_config(config_path)?;
    println!("{}", cfg.to_toml());
    let rows = run_ablation(&cfg.network, &cfg.train_config(), cfg.loss, &cfg.ablate, |row| {
        println!("finished {:<20} vrand {:.4}", row.label, row.vrand);
    })?;
    let table = ablation_table(&rows);
    print!("{table}");
    write_file(&cfg.output_dir.join("ablation.txt"), &table)?;
    Ok(0)
}

pub fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let mut results = primitive_suite(seed)?;
    results.push(full_graph_check(seed)?);
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        ok &= r.passed();
        println!("{verdict}  {:<40} max rel error {:.3e} (< {:.0e})", r.name, r.max_rel_error, r.threshold);
    }
    Ok(if ok { 0 } else { 2 })
}

pub fn cmd_synth(
    kind: SynthKind,
    out: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    split: SplitArg,
) -> Result<i32> {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(count);
    let mut channels = 1;
    for i in 0..count as u64 {
        let id = format!("{i:03}");
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let label = PathBuf::from("labels").join(format!("{id}.png"));
        let mut fov = None;
        let sample = match kind {
            SynthKind::Membranes => synth_membranes(seed.wrapping_add(i), height, width, DEFAULT_CELLS)?.sample,
            SynthKind::Vessels => {
                let s = synth_vessels(seed.wrapping_add(i), height, width, DEFAULT_BRANCHES)?;
                let path = PathBuf::from("fov").join(format!("{id}.png"));
                save_mask(s.fov.as_deref().unwrap_or(&[]), height, width, out.join(&path))?;
                fov = Some(path);
                channels = 3;
                s
            }
        };
        save_image(&sample.image, out.join(&image))?;
        save_labels(&sample.labels, 2, out.join(&label))?;
        entries.push(ManifestEntry {
            id: Some(id),
            image,
            label,
            fov,
        });
    }
    let manifest = DatasetManifest {
        split: match split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        },
        channels,
        samples: entries,
        base_dir: out.to_path_buf(),
    };
    let path = out.join("manifest.toml");
    write_file(&path, &manifest.to_toml())?;
    println!("wrote {count} samples and {}", path.display());
    Ok(0)
}
