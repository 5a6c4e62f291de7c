use std::fs;
use std::path::{Path, PathBuf};

use mrcae_core::bss_eval::{aggregate_median, metrics_from_decomposition, EvalResult, ImageEvaluator, SourceMetrics};
use mrcae_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use mrcae_core::datapipe::{make_training_pairs, PairSet};
use mrcae_core::dataset::{manifest_root, write_synthetic_corpus, Manifest, Split, MIXTURE_FILE};
use mrcae_core::gradcheck::{self, GradcheckReport};
use mrcae_core::pipeline::separate;
use mrcae_core::trainer::{fit, FitOptions, TrainHistory, BEST_CHECKPOINT, LAST_CHECKPOINT};
use mrcae_core::wav::{read_wav, write_wav};
use mrcae_core::{AudioClip, Error, GradientSet, Model, Real, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Renders the synthetic corpus described by `cfg.data` into `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_synthetic_corpus(&cfg.data.synth, cfg.data.songs, out_dir)
}

/// Source names the model separates, with their indices in the manifest.
fn resolve_targets(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<(usize, String)>> {
    let names = cfg.data.targets.clone().unwrap_or_else(|| manifest.sources.clone());
    if names.len() != cfg.model.num_sources {
        return Err(Error::config(format!(
            "model separates {} sources but {} targets are selected ({})",
            cfg.model.num_sources,
            names.len(),
            names.join(", ")
        )));
    }
    names
        .into_iter()
        .map(|n| {
            manifest
                .sources
                .iter()
                .position(|s| *s == n)
                .map(|i| (i, n.clone()))
                .ok_or_else(|| Error::config(format!("target source '{n}' is not in the manifest")))
        })
        .collect()
}

fn pairs_for(cfg: &RunConfig, manifest: &Manifest, root: &Path, split: Split) -> Result<PairSet> {
    let targets = resolve_targets(cfg, manifest)?;
    let d = &cfg.data;
    let mut pairs = PairSet::new(d.seg_len, cfg.model.in_channels, cfg.model.output_channels());
    for entry in manifest.songs_in(split) {
        let song = manifest.load_song(root, &entry.name)?;
        if song.mixture.channels() != cfg.model.in_channels {
            return Err(Error::config(format!(
                "song {} has {} channels, model expects {}",
                entry.name,
                song.mixture.channels(),
                cfg.model.in_channels
            )));
        }
        let srcs: Vec<AudioClip> = targets.iter().map(|(i, _)| song.sources[*i].clone()).collect();
        pairs.extend(make_training_pairs(&song.mixture, &srcs, d.seg_len, d.hop_train(), d.scale_targets)?)?;
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: TrainHistory,
    pub checkpoint_dir: PathBuf,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

fn train_impl<T: Real>(
    cfg: &RunConfig,
    init: Option<&Path>,
    out_dir: &Path,
    verbose: bool,
) -> Result<TrainSummary> {
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let root = manifest_root(&cfg.data.manifest);
    let train = pairs_for(cfg, &manifest, &root, Split::Train)?;
    let val = pairs_for(cfg, &manifest, &root, Split::Validation)?;
    if train.is_empty() {
        return Err(Error::config("manifest has no training songs"));
    }
    if val.is_empty() {
        return Err(Error::config("manifest has no validation songs"));
    }
    let model = match init {
        Some(path) => load_checkpoint_for::<T>(path, &cfg.model)?,
        None => Model::<T>::new(cfg.model.clone())?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    let opts = FitOptions {
        checkpoint_dir: Some(out_dir.to_path_buf()),
        verbose,
    };
    let (best, history) = fit(model, &train, &val, &cfg.hyper, &opts)?;
    if history.records.is_empty() {
        // nothing ran: the starting point is both the best and the last model
        save_checkpoint(&best, out_dir.join(BEST_CHECKPOINT))?;
        save_checkpoint(&best, out_dir.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainSummary {
        history,
        checkpoint_dir: out_dir.to_path_buf(),
        train_pairs: train.len(),
        val_pairs: val.len(),
    })
}

/// Trains on the manifest's training split, validating on its validation
/// split. `init` resumes from a checkpoint's weights.
pub fn cmd_train(
    cfg: &RunConfig,
    precision: Precision,
    init: Option<&Path>,
    out_dir: &Path,
    verbose: bool,
) -> Result<TrainSummary> {
    match precision {
        Precision::Single => train_impl::<f32>(cfg, init, out_dir, verbose),
        Precision::Double => train_impl::<f64>(cfg, init, out_dir, verbose),
    }
}

/// Output names for the separated sources.
fn output_names(cfg: &RunConfig) -> Vec<String> {
    if let Some(t) = &cfg.data.targets {
        return t.clone();
    }
    match Manifest::load(&cfg.data.manifest) {
        Ok(m) if m.sources.len() == cfg.model.num_sources => m.sources,
        _ => (0..cfg.model.num_sources).map(|l| format!("source{l}")).collect(),
    }
}

fn separate_file<T: Real>(cfg: &RunConfig, model: &Model<T>, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mix = read_wav(input)?;
    let d = &cfg.data;
    let outs = separate(model, &mix, d.hop_test, d.overlap_mode, d.infer_batch)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, clip) in output_names(cfg).iter().zip(&outs) {
        let path = out_dir.join(format!("{name}.wav"));
        write_wav(clip, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn separate_impl<T: Real>(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint_for::<T>(checkpoint, &cfg.model)?;
    match input {
        Some(path) => separate_file(cfg, &model, path, out_dir),
        None => {
            let manifest = Manifest::load(&cfg.data.manifest)?;
            let root = manifest_root(&cfg.data.manifest);
            let mut written = Vec::new();
            for entry in manifest.songs_in(Split::Test) {
                let mix = root.join(&entry.name).join(MIXTURE_FILE);
                written.extend(separate_file(cfg, &model, &mix, &out_dir.join(&entry.name))?);
            }
            Ok(written)
        }
    }
}

/// Separates one mixture file, or every test song of the manifest when
/// `input` is `None` (written to `out_dir/<song>/`).
pub fn cmd_separate(
    cfg: &RunConfig,
    precision: Precision,
    checkpoint: &Path,
    input: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    match precision {
        Precision::Single => separate_impl::<f32>(cfg, checkpoint, input, out_dir),
        Precision::Double => separate_impl::<f64>(cfg, checkpoint, input, out_dir),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMetrics {
    pub source: String,
    #[serde(flatten)]
    pub metrics: SourceMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongReport {
    pub song: String,
    pub sources: Vec<NamedMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongFailure {
    pub song: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianBlock {
    pub songs: usize,
    pub sources: Vec<NamedMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub filter_taps: usize,
    pub complete: bool,
    pub songs: Vec<SongReport>,
    pub failures: Vec<SongFailure>,
    pub median: Option<MedianBlock>,
}

fn evaluate_one(
    manifest: &Manifest,
    ref_root: &Path,
    est_dir: &Path,
    targets: &[(usize, String)],
    taps: usize,
) -> Result<EvalResult> {
    let song = manifest
        .songs
        .iter()
        .find(|s| est_dir.file_name().is_some_and(|n| n == s.name.as_str()))
        .ok_or_else(|| Error::config("song is not listed in the reference manifest"))?;
    let refs = manifest.load_song(ref_root, &song.name)?;
    let ev = ImageEvaluator::new(&refs.sources, taps)?;
    let mut sources = Vec::new();
    for (idx, name) in targets {
        let est = read_wav(est_dir.join(format!("{name}.wav")))?;
        sources.push(metrics_from_decomposition(&ev.decompose(&est, *idx)?)?);
    }
    Ok(EvalResult {
        sources,
        filter_len: taps,
    })
}

/// Scores every song directory under `estimates` against the corpus whose
/// manifest sits in `references`. The report is always written; songs that
/// fail are listed and mark it incomplete, and the first failure is returned
/// as the error.
pub fn cmd_evaluate(cfg: &RunConfig, estimates: &Path, references: &Path, report_path: &Path) -> Result<EvalReport> {
    let manifest = Manifest::load(references.join("manifest.json"))?;
    let targets = resolve_targets(cfg, &manifest)?;
    let taps = cfg.eval.filter_taps;
    let mut dirs: Vec<PathBuf> = fs::read_dir(estimates)
        .map_err(|e| Error::io(estimates, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::config(format!("no song directories under {}", estimates.display())));
    }

    let mut songs = Vec::new();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for dir in &dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match evaluate_one(&manifest, references, dir, &targets, taps) {
            Ok(r) => {
                songs.push(SongReport {
                    song: name,
                    sources: targets
                        .iter()
                        .zip(&r.sources)
                        .map(|((_, s), m)| NamedMetrics {
                            source: s.clone(),
                            metrics: *m,
                        })
                        .collect(),
                });
                results.push(r);
            }
            Err(e) => {
                let msg = format!("song {name}: {e}");
                failures.push(SongFailure {
                    song: name,
                    error: e.to_string(),
                });
                first_err.get_or_insert(match e {
                    Error::Config(_) => Error::config(msg),
                    Error::Numeric(_) => Error::numeric(msg),
                    _ => Error::format(format!("song {}", failures.last().unwrap().song), e.to_string()),
                });
            }
        }
    }
    let median = if results.is_empty() {
        None
    } else {
        let m = aggregate_median(&results)?;
        Some(MedianBlock {
            songs: m.songs,
            sources: targets
                .iter()
                .zip(m.sources)
                .map(|((_, s), metrics)| NamedMetrics {
                    source: s.clone(),
                    metrics,
                })
                .collect(),
        })
    };
    let report = EvalReport {
        filter_taps: taps,
        complete: failures.is_empty(),
        songs,
        failures,
        median,
    };
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(report_path, text + "\n").map_err(|e| Error::io(report_path, e))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Finite-difference check of every parameter group of the tiny reference
/// model. `corrupt` perturbs one analytic gradient to prove the check bites.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let hook = |g: &mut GradientSet<f64>| {
        if let Some(v) = g.groups.first_mut().and_then(|(_, v)| v.first_mut()) {
            *v = *v * 1.01 + 1e-3;
        }
    };
    gradcheck::check_tiny(seed, if corrupt { Some(&hook) } else { None })
}

/// Process exit code for an error: 2 configuration, 3 data or I/O,
/// 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    }
}
