//! Command implementations behind the `cidfd` binary: dataset generation,
//! two-stage training, k-means evaluation, and similarity analysis. Each
//! command persists the resolved configuration alongside its outputs and is
//! idempotent for a fixed config and seed.

use ndarray::Array2;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{self, Projection2d};
use crate::cluster_eval::{evaluate, EvalReport, Partition};
use crate::config::{DataSource, ExperimentConfig};
use crate::core::seed::derive_seed;
use crate::data::{self, digits, AugmentPolicy, Dataset, Role};
use crate::error::{Error, Result};
use crate::trainer::{extract_features, TrainState, Trainer};

/// Which stage(s) `train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArg {
    Bg,
    Tg,
    Both,
}

impl std::str::FromStr for StageArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bg" => Ok(StageArg::Bg),
            "tg" => Ok(StageArg::Tg),
            "both" => Ok(StageArg::Both),
            other => Err(format!("unknown stage {other:?} (expected bg, tg, or both)")),
        }
    }
}

fn target_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dataset.data_dir.join("target")
}

fn background_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dataset.data_dir.join("background")
}

fn checkpoint_stem(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("checkpoints").join(name)
}

/// Builds the target/background dataset pair on disk: composed images as
/// PNGs plus `manifest.csv` under `<data_dir>/target` and
/// `<data_dir>/background`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let (target, background) = match cfg.dataset.source {
        DataSource::ImageDir => {
            return Err(Error::Config(
                "gen-data applies to idx-based sources; image-dir datasets are already on disk"
                    .into(),
            ));
        }
        DataSource::SyntheticDigits => {
            let dir = cfg.dataset.mnist_dir.as_ref().expect("validated");
            digits::write_digit_corpus(
                dir,
                cfg.dataset.synthetic_count,
                derive_seed(cfg.seed, "digit-corpus", 0),
            )?;
            data::build_stripe_mnist(dir, cfg.seed, cfg.dataset.scale)?
        }
        DataSource::MnistIdx => {
            let dir = cfg.dataset.mnist_dir.as_ref().expect("validated");
            data::build_stripe_mnist(dir, cfg.seed, cfg.dataset.scale)?
        }
    };
    data::save_dataset(&target, &target_dir(cfg))?;
    data::save_dataset(&background, &background_dir(cfg))?;
    cfg.persist_resolved(&cfg.output_dir)?;
    Ok(())
}

fn load_role(cfg: &ExperimentConfig, role: Role) -> Result<Dataset> {
    match cfg.dataset.source {
        DataSource::ImageDir => {
            let (dir, manifest) = match role {
                Role::Target => (
                    cfg.dataset.target_dir.clone().expect("validated"),
                    cfg.dataset.target_manifest.clone(),
                ),
                Role::Background => (
                    cfg.dataset.background_dir.clone().expect("validated"),
                    cfg.dataset.background_manifest.clone(),
                ),
            };
            let manifest = manifest.unwrap_or_else(|| dir.join(data::MANIFEST_FILE));
            data::load_image_dir(&dir, &manifest, role, cfg.dataset.resize)
        }
        _ => {
            let dir = match role {
                Role::Target => target_dir(cfg),
                Role::Background => background_dir(cfg),
            };
            let manifest = dir.join(data::MANIFEST_FILE);
            if !manifest.exists() {
                return Err(Error::Config(format!(
                    "dataset not found at {} (run gen-data first)",
                    dir.display()
                )));
            }
            data::load_image_dir(&dir, &manifest, role, None)
        }
    }
}

fn augment_policy_for(dataset: &Dataset) -> AugmentPolicy {
    let (h, w, c) = dataset.spec.shape;
    if c == 1 && h <= 40 && w <= 40 {
        AugmentPolicy::crop_pad_default()
    } else {
        AugmentPolicy::natural_default()
    }
}

/// Runs the requested training stage(s); checkpoints land under
/// `<output_dir>/checkpoints` and the batch log at
/// `<output_dir>/trainlog.ndjson`.
pub fn cmd_train(cfg: &ExperimentConfig, stage: StageArg, idfd_baseline: bool) -> Result<()> {
    cfg.validate()?;
    if idfd_baseline && stage == StageArg::Bg {
        return Err(Error::Config(
            "the IDFD baseline has no background stage; use --stage tg or both".into(),
        ));
    }
    cfg.persist_resolved(&cfg.output_dir)?;
    let train_cfg = cfg.train_config();
    let temps = cfg.temperature_set::<f32>()?;

    let target = load_role(cfg, Role::Target)?;
    let run_bg = matches!(stage, StageArg::Bg | StageArg::Both) && !idfd_baseline;
    let run_tg = matches!(stage, StageArg::Tg | StageArg::Both);
    let background = if run_bg {
        Some(load_role(cfg, Role::Background)?)
    } else {
        None
    };

    let mut trainer = Trainer::new(train_cfg.clone(), temps).with_output(&cfg.output_dir)?;
    trainer.idfd_baseline = idfd_baseline;
    trainer.augment_policy = augment_policy_for(&target);

    let bg_stem = checkpoint_stem(cfg, "bg");
    let mut state = if run_bg {
        let background_len = background.as_ref().expect("run_bg").len();
        TrainState::new(&cfg.encoder.arch, &train_cfg, target.len(), background_len)?
    } else if idfd_baseline {
        // the background branch is inert; size Z̄ to the target for shape
        TrainState::new(&cfg.encoder.arch, &train_cfg, target.len(), target.len())?
    } else {
        if !bg_stem.with_extension("json").exists() {
            return Err(Error::StageOrder(format!(
                "stage tg requires a background checkpoint at {}; run --stage bg first",
                bg_stem.display()
            )));
        }
        TrainState::load_checkpoint(&bg_stem, &train_cfg)?
    };

    if run_bg {
        trainer.train_background(&mut state, background.as_ref().expect("run_bg"))?;
        state.save_checkpoint(&bg_stem, "bg", train_cfg.epochs_bg)?;
    }
    if run_tg {
        trainer.train_target(&mut state, &target)?;
        state.save_checkpoint(&checkpoint_stem(cfg, "tg"), "tg", train_cfg.epochs_tg)?;
    }
    Ok(())
}

fn load_target_encoder(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<TrainState> {
    let stem = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_stem(cfg, "tg"));
    if !stem.with_extension("json").exists() {
        return Err(Error::Config(format!(
            "checkpoint not found at {} (run train first)",
            stem.display()
        )));
    }
    TrainState::load_checkpoint(&stem, &cfg.train_config())
}

/// Extracts features with the trained target encoder, runs k-means, scores
/// ACC / NMI / ARI against the target labels, and writes
/// `<output_dir>/metrics.json`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let target = load_role(cfg, Role::Target)?;
    let Some(labels) = target.target_labels() else {
        return Err(Error::Config(
            "evaluation requires target labels in the manifest".into(),
        ));
    };
    let Some(class_count) = target.spec.class_count else {
        return Err(Error::Config("target dataset has no classes".into()));
    };
    let state = load_target_encoder(cfg, checkpoint)?;
    let feats = extract_features(&state.g_encoder, &target, 256)?;
    let feats64 = feats.rows().mapv(|v| v as f64);
    let truth = Partition::from_labels(&labels);
    let k = cfg.eval.k.unwrap_or(class_count);
    let (report, _) = evaluate(
        feats64.view(),
        &truth,
        k,
        cfg.seed,
        cfg.eval.kmeans_restarts,
    )?;
    // the derived stream feeds k-means; the report records the root seed
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("serializing metrics: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    cfg.persist_resolved(&cfg.output_dir)?;
    Ok(report)
}

/// Exports the four-pair-type similarity histograms and a 2-D projection of
/// the learned features as CSV files under the output directory.
pub fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let target = load_role(cfg, Role::Target)?;
    let Some(tg_labels) = target.target_labels() else {
        return Err(Error::Config(
            "analysis requires target labels in the manifest".into(),
        ));
    };
    let Some(bg_labels) = target.background_labels() else {
        return Err(Error::Config(
            "analysis requires background labels in the manifest; pair types need both factors"
                .into(),
        ));
    };
    let state = load_target_encoder(cfg, checkpoint)?;
    let feats = extract_features(&state.g_encoder, &target, 256)?;
    let feats64: Array2<f64> = feats.rows().mapv(|v| v as f64);

    let stats =
        analysis::pair_similarity_stats(feats64.view(), &tg_labels, &bg_labels, cfg.eval.bins)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    analysis::export_histograms(
        &stats,
        &cfg.output_dir.join("pair_histograms.csv"),
        &cfg.output_dir.join("pair_bins.json"),
    )?;

    let projection = analysis::project_2d(
        feats64.view(),
        Projection2d::PrincipalComponents,
        derive_seed(cfg.seed, "projection", 0),
    )?;
    analysis::export_projection(
        projection.view(),
        Some(&tg_labels),
        Some(&bg_labels),
        &cfg.output_dir.join("projection.csv"),
    )?;
    cfg.persist_resolved(&cfg.output_dir)?;
    Ok(())
}
