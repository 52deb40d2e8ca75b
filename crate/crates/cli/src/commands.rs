use std::path::{Path, PathBuf};

use speckformer::data::{
    generate_synthetic, gray_to_tensor, load_dataset, pnm, preprocess, preprocess_image,
    split_indices, write_dataset, LoadOptions, SpecklegramSample,
};
use speckformer::models::Model;
use speckformer::train::{
    evaluate, load_checkpoint, read_history, save_checkpoint, train_with_progress, write_history,
    Checkpoint, Dataset, MetricsReport, Resume,
};
use speckformer::xai::write_explanations;
use speckformer::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const BEST_CHECKPOINT: &str = "checkpoint.spkf";
pub const LAST_CHECKPOINT: &str = "last.spkf";
pub const HISTORY: &str = "history.csv";
pub const METRICS: &str = "metrics.json";
pub const CONFIG: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<SpecklegramSample>> {
    match &cfg.data.manifest {
        Some(path) => load_dataset(path, &LoadOptions::default()),
        None => generate_synthetic(&cfg.data.synthetic, cfg.data.synthetic_seed),
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> Dataset {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => {
                let mut all = self.train.clone();
                for d in [&self.val, &self.test] {
                    all.images.extend(d.images.iter().cloned());
                    all.targets.extend(&d.targets);
                }
                all
            }
        }
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let samples = load_samples(cfg)?;
    let pre = cfg.effective_preprocess();
    let images = samples
        .iter()
        .map(|s| preprocess(s, &pre))
        .collect::<Result<Vec<_>>>()?;
    let all = Dataset::new(images, samples.iter().map(|s| s.temperature).collect())?;
    let idx = split_indices(all.len(), cfg.data.split, cfg.data.split_seed)?;
    Ok(Splits {
        train: all.subset(&idx.train),
        val: all.subset(&idx.val),
        test: all.subset(&idx.test),
    })
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let samples = generate_synthetic(&cfg.data.synthetic, cfg.data.synthetic_seed)?;
    write_dataset(out, &samples)?;
    Ok(samples.len())
}

/// Writes the preprocessed dataset as PGM images plus a manifest.
pub fn preprocess_dataset(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let pre = cfg.effective_preprocess();
    let samples = load_samples(cfg)?
        .into_iter()
        .map(|s| {
            Ok(SpecklegramSample {
                image: preprocess(&s, &pre)?,
                ..s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(out, &samples)?;
    Ok(samples.len())
}

pub struct TrainSummary {
    pub best_epoch: u64,
    pub last_epoch: u64,
    pub val: MetricsReport,
}

fn with_metadata(mut ckpt: Checkpoint, cfg: &RunConfig) -> Checkpoint {
    ckpt.metadata = serde_json::to_value(cfg).expect("config serializes");
    ckpt
}

/// Trains into `cfg.output_dir`. With `resume`, continues from that
/// checkpoint, keeping the best checkpoint and history already on disk.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    log: &mut dyn FnMut(String),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    if splits.val.is_empty() {
        return Err(Error::Config(format!(
            "the {}% validation split of {} samples is empty",
            cfg.data.split.val,
            splits.train.len() + splits.test.len()
        )));
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (mut model, resume_state, mut history) = match resume {
        None => (Model::new(cfg.model.clone())?, None, Vec::new()),
        Some(path) => {
            let last = load_checkpoint(path)?;
            let model = last.model()?;
            let epoch = last.epoch as usize;
            let best_path = out.join(BEST_CHECKPOINT);
            let best = if best_path.exists() {
                Some(load_checkpoint(&best_path)?)
            } else {
                None
            };
            let hist_path = out.join(HISTORY);
            let mut history = if hist_path.exists() {
                read_history(&hist_path)?
            } else {
                Vec::new()
            };
            history.retain(|h| h.epoch <= epoch);
            (model, Some(Resume { epoch, best }), history)
        }
    };
    let outcome = train_with_progress(
        &mut model,
        &splits.train,
        &splits.val,
        &cfg.train,
        resume_state,
        &mut |h| {
            log(format!(
                "epoch {} train_mse {:.6} val_mse {:.6}",
                h.epoch, h.train_mse, h.val_mse
            ))
        },
    )?;
    history.extend(outcome.history.iter().copied());
    let best = with_metadata(outcome.best, cfg);
    let last = with_metadata(outcome.last, cfg);
    save_checkpoint(&best, out.join(BEST_CHECKPOINT))?;
    save_checkpoint(&last, out.join(LAST_CHECKPOINT))?;
    write_history(out.join(HISTORY), &history)?;
    let val = evaluate(&best.model()?, &best.scaler, &splits.val)?;
    val.write_json(out.join(METRICS))?;
    let cfg_path = out.join(CONFIG);
    std::fs::write(&cfg_path, cfg.to_json() + "\n").map_err(io_err(&cfg_path))?;
    Ok(TrainSummary {
        best_epoch: best.epoch,
        last_epoch: last.epoch,
        val,
    })
}

/// The run configuration stored with a checkpoint by `train`.
pub fn config_of(ckpt: &Checkpoint, path: &Path) -> Result<RunConfig> {
    if ckpt.metadata.is_null() {
        return Err(Error::Config(format!(
            "{} carries no run configuration; pass --config",
            path.display()
        )));
    }
    serde_json::from_value(ckpt.metadata.clone()).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: format!("stored run configuration: {e}"),
    })
}

pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    split: SplitName,
) -> Result<MetricsReport> {
    let splits = load_splits(cfg)?;
    evaluate(&ckpt.model()?, &ckpt.scaler, &splits.get(split))
}

/// Loads a PGM/PPM file and preprocesses it like the training data.
pub fn load_image(cfg: &RunConfig, path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let raw = if bytes.starts_with(b"P6") {
        let img = pnm::read_ppm(path)?;
        let unit: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new([img.height, img.width, 3], unit)?
    } else {
        gray_to_tensor(&pnm::read_pgm(path)?, false)
    };
    preprocess_image(&raw, &cfg.effective_preprocess())
}

pub fn explain(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    image: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let img = match image {
        Some(p) => load_image(cfg, p)?,
        None => {
            let test = load_splits(cfg)?.test;
            test.images
                .into_iter()
                .next()
                .ok_or(Error::InsufficientData { need: 1, got: 0 })?
        }
    };
    write_explanations(&ckpt.model()?, &img, out)
}
