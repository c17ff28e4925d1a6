//! Experiment runs: data generation, training, evaluation and reporting
//! driven by one [`ExperimentConfig`].
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.resolved.toml
//! <out>/data/{train.bin, test.bin, summary.json}     toyset only
//! <out>/runs/<model>-<snr set>-seed<k>/{checkpoint.bin, train_log.csv}
//! <out>/tables/<model>-<snr set>-seed<k>.csv
//! <out>/report/{report.json, *.csv}
//! ```

mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{DatasetConfig, ExperimentConfig, Overrides, Precision, RunSpec, TestConfig};

use crate::analysis::{build_report, AnalysisReport, PredictionTable};
use crate::data::{
    apply_stats, corpus_stats, load_cifar10, make_batch, preprocess_corpus, synth_toyset, toyset, CorpusStats,
    LabeledImage, SnrChoice, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Element;
use crate::train::checkpoint::inspect;
use crate::train::{build_model, load_checkpoint, save_checkpoint, LogWriter, Trainer, LOG_HEADER};

const TOYSET_TRAIN: u64 = 100;
const TOYSET_TEST: u64 = 101;
const INIT: u64 = 4;
const EVAL: u64 = 200;

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.run_dir(name).join("checkpoint.bin")
    }
    pub fn train_log(&self, name: &str) -> PathBuf {
        self.run_dir(name).join("train_log.csv")
    }
    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join("tables").join(format!("{name}.csv"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the resolved config, or checks that an existing run directory was
/// created from the same one.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Layout> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    mkdir(&layout.root)?;
    let path = layout.config();
    let mut resolved = cfg.clone();
    resolved.train.seed = cfg.seed;
    let text = format!("# grucnn-core {}\n{}", env!("CARGO_PKG_VERSION"), resolved.to_toml()?);
    if path.exists() {
        let mut old = ExperimentConfig::load(&path)?;
        old.out = cfg.out.clone();
        old.train.seed = cfg.train.seed;
        if &old != cfg {
            return Err(Error::Config(format!(
                "{} was created with a different configuration; use a new output directory",
                layout.root.display()
            )));
        }
    } else {
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(layout)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub train_images: usize,
    pub test_images: usize,
    /// sha256 over the encoded training and test images.
    pub digest: String,
    pub raw: CorpusStats,
    pub normalized: CorpusStats,
}

fn raw_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    match &cfg.dataset {
        DatasetConfig::Toyset { .. } => Ok((
            toyset::read_archive(layout.data().join("train.bin"))?,
            toyset::read_archive(layout.data().join("test.bin"))?,
        )),
        DatasetConfig::Cifar10 { train, test } => {
            let mut all = Vec::new();
            for p in train {
                all.extend(load_cifar10(p)?);
            }
            Ok((all, load_cifar10(test)?))
        }
    }
}

/// Writes the toyset archives (or validates the CIFAR-10 files) and reports
/// corpus statistics.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    let layout = prepare(cfg)?;
    if let DatasetConfig::Toyset {
        per_class,
        test_per_class,
        image_size,
    } = cfg.dataset
    {
        mkdir(&layout.data())?;
        let train = synth_toyset(per_class, image_size, &mut stream(cfg.seed, &[TOYSET_TRAIN]))?;
        let test = synth_toyset(test_per_class, image_size, &mut stream(cfg.seed, &[TOYSET_TEST]))?;
        toyset::write_archive(layout.data().join("train.bin"), &train)?;
        toyset::write_archive(layout.data().join("test.bin"), &test)?;
    }
    let (train, test) = raw_data(cfg, &layout)?;
    let mut h = Sha256::new();
    for img in train.iter().chain(&test) {
        h.update([img.label as u8]);
        for v in img.pixels.data() {
            h.update(v.to_le_bytes());
        }
    }
    let (normalized, raw) = preprocess_corpus(&train)?;
    let summary = GenerateSummary {
        train_images: train.len(),
        test_images: test.len(),
        digest: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        raw,
        normalized: corpus_stats(&normalized)?,
    };
    if matches!(cfg.dataset, DatasetConfig::Toyset { .. }) {
        let p = layout.data().join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}

/// Normalized training and test images, generating the toyset first when
/// it is missing.
pub fn load_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if matches!(cfg.dataset, DatasetConfig::Toyset { .. }) && !layout.data().join("test.bin").exists() {
        run_generate(cfg)?;
    }
    let (train, test) = raw_data(cfg, layout)?;
    let (train, stats) = preprocess_corpus(&train)?;
    let mut test = apply_stats(&test, stats);
    if let Some(n) = cfg.test.items {
        test.truncate(n);
    }
    Ok((train, test))
}

/// Runs `f` over `items` on `jobs` threads, keeping results in input order.
fn parallel<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    use rayon::prelude::*;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub jobs: usize,
    /// Stop each run after this many updates in total (checkpointing first),
    /// as if interrupted.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub name: String,
    pub steps: u64,
    pub finished: bool,
    pub final_loss: Option<f64>,
}

/// Trains (or resumes) every configured run and replicate.
pub fn run_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<TrainOutcome>> {
    let layout = prepare(cfg)?;
    let (train, _) = load_data(cfg, &layout)?;
    parallel(&cfg.jobs(), opts.jobs, |(run, k)| match cfg.precision {
        Precision::F32 => train_one::<f32>(cfg, &layout, run, *k, &train, opts),
        Precision::F64 => train_one::<f64>(cfg, &layout, run, *k, &train, opts),
    })
}

/// Keeps the header and rows with `step < keep` so a resumed run does not
/// duplicate steps logged after the last checkpoint.
fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if line == LOG_HEADER || step.is_some_and(|s| s < keep) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn train_one<T: Element>(
    cfg: &ExperimentConfig,
    layout: &Layout,
    run: &RunSpec,
    k: usize,
    corpus: &[LabeledImage],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let name = ExperimentConfig::run_name(run, k);
    let spec = cfg.model_spec(&run.model)?;
    let train_cfg = crate::train::TrainConfig {
        snr_set: run.snr_set.clone(),
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let seed = train_cfg.replicate_seed(k);
    mkdir(&layout.run_dir(&name))?;
    let ckpt = layout.checkpoint(&name);
    let log_path = layout.train_log(&name);
    let mut trainer = if ckpt.exists() {
        let t = load_checkpoint::<T>(&ckpt, Some(&spec))?;
        if t.config != train_cfg || t.seed != seed {
            return Err(Error::CheckpointMismatch(format!(
                "{} was trained with a different configuration",
                ckpt.display()
            )));
        }
        if log_path.exists() {
            truncate_log(&log_path, t.counters.step)?;
        }
        info!("{name}: resuming at step {}", t.counters.step);
        t
    } else {
        let model = build_model::<T, _>(&spec, &mut stream(seed, &[INIT]))?;
        Trainer::new(model, train_cfg, seed)?
    };
    let fresh = !log_path.exists() || trainer.counters.step == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = LogWriter::new(std::io::BufWriter::new(file), fresh).map_err(|e| Error::io(&log_path, e))?;
    let start = std::time::Instant::now();
    let mut final_loss = None;
    while !trainer.is_finished() {
        if opts.max_steps.is_some_and(|m| trainer.counters.step >= m) {
            save_checkpoint(&trainer, &ckpt)?;
            return Ok(TrainOutcome {
                name,
                steps: trainer.counters.step,
                finished: false,
                final_loss,
            });
        }
        let epoch = trainer.counters.epoch;
        let mut row = trainer.step(corpus)?;
        row.wall_ms = start.elapsed().as_millis() as u64;
        log.write(&row).map_err(|e| Error::io(&log_path, e))?;
        final_loss = Some(row.loss);
        if trainer.counters.epoch != epoch {
            save_checkpoint(&trainer, &ckpt)?;
            info!("{name}: epoch {} loss {:.4}", trainer.counters.epoch, row.loss);
        }
    }
    if !ckpt.exists() {
        save_checkpoint(&trainer, &ckpt)?;
    }
    Ok(TrainOutcome {
        name,
        steps: trainer.counters.step,
        finished: true,
        final_loss,
    })
}

/// Per-frame probabilities of one trained model on the test protocol. Test
/// noise depends only on the experiment seed, so every model sees the same
/// sequences. Items are ordered by SNR (as configured), then test image.
pub fn evaluate<T: Element>(
    trainer: &mut Trainer<T>,
    test: &[LabeledImage],
    cfg: &ExperimentConfig,
    run: &RunSpec,
    replicate: usize,
) -> Result<PredictionTable> {
    let t = &cfg.test;
    let n = test.len();
    if n == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let items = t.snr.len() * n;
    let mut probs = vec![0.0; items * t.repetitions * t.frames * NUM_CLASSES];
    let mut labels = Vec::with_capacity(items);
    let mut snr = Vec::with_capacity(items);
    for &level in &t.snr {
        for img in test {
            labels.push(img.label);
            snr.push(level);
        }
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    for (si, &level) in t.snr.iter().enumerate() {
        for rep in 0..t.repetitions {
            for start in (0..n).step_by(t.batch_size) {
                let chunk = &idx[start..(start + t.batch_size).min(n)];
                let seed = derive_seed(cfg.seed, &[EVAL, si as u64, rep as u64, start as u64]);
                let batch = make_batch::<T>(test, chunk, t.frames, SnrChoice::Fixed(level), seed)?;
                let out = trainer.model.forward_sequence(&batch, false, &mut dummy)?;
                for (b, seq) in out.data().chunks_exact(t.frames * NUM_CLASSES).enumerate() {
                    let item = si * n + chunk[b];
                    let base = (item * t.repetitions + rep) * t.frames * NUM_CLASSES;
                    for (f, row) in seq.chunks_exact(NUM_CLASSES).enumerate() {
                        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                        let s: f64 = row.iter().sum();
                        for (c, v) in row.iter().enumerate() {
                            probs[base + f * NUM_CLASSES + c] = v / s;
                        }
                    }
                }
            }
        }
    }
    PredictionTable::new(
        run.model.clone(),
        vec![replicate as u64],
        run.snr_set.tag(),
        t.repetitions,
        t.frames,
        labels,
        snr,
        probs,
    )
}

/// Evaluates every trained checkpoint and writes its prediction table.
pub fn run_eval(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<PathBuf>> {
    let layout = prepare(cfg)?;
    let (_, test) = load_data(cfg, &layout)?;
    mkdir(&layout.root.join("tables"))?;
    parallel(&cfg.jobs(), jobs, |(run, k)| {
        let name = ExperimentConfig::run_name(run, *k);
        let ckpt = layout.checkpoint(&name);
        let spec = cfg.model_spec(&run.model)?;
        let bytes = std::fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let info = inspect(&bytes)?;
        let table = if info.precision == 32 {
            evaluate(&mut crate::train::checkpoint::decode::<f32>(&bytes, Some(&spec))?, &test, cfg, run, *k)?
        } else {
            evaluate(&mut crate::train::checkpoint::decode::<f64>(&bytes, Some(&spec))?, &test, cfg, run, *k)?
        };
        let path = layout.table(&name);
        table.save(&path)?;
        info!("{name}: wrote {}", path.display());
        Ok(path)
    })
}

/// Loads whatever tables exist, pools replicates per (model, SNR set) and
/// writes the report; missing tables are listed as gaps.
pub fn run_report(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    let layout = prepare(cfg)?;
    let mut groups: Vec<((String, String), Vec<PredictionTable>)> = Vec::new();
    let mut gaps = Vec::new();
    for (run, k) in cfg.jobs() {
        let name = ExperimentConfig::run_name(&run, k);
        let path = layout.table(&name);
        if !path.exists() {
            gaps.push(format!("missing prediction table {}", path.display()));
            continue;
        }
        let t = PredictionTable::load(&path)?;
        let key = (t.model.clone(), t.train_set.clone());
        match groups.iter_mut().find(|(g, _)| *g == key) {
            Some((_, v)) => v.push(t),
            None => groups.push((key, vec![t])),
        }
    }
    let pooled = groups
        .iter()
        .map(|(_, v)| PredictionTable::pool(v))
        .collect::<Result<Vec<_>>>()?;
    let mut report = build_report(&pooled, &cfg.report)?;
    for c in &report.calibration {
        if let Some(e) = &c.error {
            gaps.push(format!("calibration of {}-{}: {e}", c.model, c.train_set));
        }
    }
    report.gaps = gaps;
    report.write(layout.report())?;
    write_figure_sidecars(&report, &layout.report())?;
    Ok(report)
}

/// Last-frame accuracy per SNR and pairwise difference curves between
/// model groups.
fn write_figure_sidecars(report: &AnalysisReport, dir: &Path) -> Result<()> {
    let path = dir.join("last_frame_accuracy.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::invalid(format!("writing report sidecar: {e}"));
    w.write_record(["model", "train_set", "bayes", "snr", "percent"]).map_err(csv_err)?;
    let mut curves: BTreeMap<(String, bool), Vec<(String, usize, f64)>> = BTreeMap::new();
    for m in &report.accuracy_curves {
        let group = format!("{}-{}", m.model, m.train_set);
        for c in &m.curves {
            let last = c.percent.last().copied().unwrap_or(f64::NAN);
            w.write_record([&m.model, &m.train_set, &c.bayes.to_string(), &c.snr.to_string(), &last.to_string()])
                .map_err(csv_err)?;
            for (f, &p) in c.percent.iter().enumerate() {
                curves
                    .entry((group.clone(), c.bayes))
                    .or_default()
                    .push((c.snr.to_string(), f, p));
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("difference_curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["a", "b", "bayes", "snr", "frame", "difference"]).map_err(csv_err)?;
    for ((a, bayes), ca) in &curves {
        for ((b, bayes_b), cb) in &curves {
            if a == b || bayes != bayes_b {
                continue;
            }
            for (snr, f, pa) in ca {
                if let Some((_, _, pb)) = cb.iter().find(|(s, g, _)| s == snr && g == f) {
                    w.write_record([a, b, &bayes.to_string(), snr, &f.to_string(), &(pa - pb).to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
