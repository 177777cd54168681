//! Two-stage training orchestration.
//!
//! Stage 1 trains the background encoder on the background dataset with the
//! instance-discrimination + feature-decorrelation objective. Stage 2
//! freezes it and trains the target encoder with the background-weighted
//! contrastive objective. Memory banks are updated by moving average after
//! every optimizer step, and every random stream derives from the run seed.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::core::checkpoint::{self, NamedTensor};
use crate::core::seed::derive_seed;
use crate::core::{FeatureBatch, MemoryBank, TemperatureSet, TrainConfig};
use crate::data::{augment, AugmentPolicy, Dataset};
use crate::encoder::{build_encoder, pack_images, Encoder};
use crate::error::{Error, Result};
use crate::losses::{bg_total_loss, tg_total_loss, weight_coefficients, WeightMatrix};
use crate::nn::Sgd;

/// The three memory banks: target features (V̄), background features of
/// target samples (W̄), both sized N, and background-dataset features (Z̄)
/// sized M.
pub struct Banks {
    pub v: MemoryBank<f32>,
    pub w: MemoryBank<f32>,
    pub z: MemoryBank<f32>,
}

/// Mutable state of a two-stage run.
pub struct TrainState {
    pub f_encoder: Encoder,
    pub g_encoder: Encoder,
    pub banks: Banks,
    stage1_done: bool,
    opt_f: Sgd,
    opt_g: Sgd,
    /// `(stage, epoch, mean per-sample loss)` per finished epoch.
    pub history: Vec<(u8, usize, f64)>,
}

impl TrainState {
    /// Fresh state: seeded encoders and random unit banks sized to the two
    /// datasets.
    pub fn new(
        arch_tag: &str,
        cfg: &TrainConfig,
        target_size: usize,
        background_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let f_encoder = build_encoder(arch_tag, cfg.dim, derive_seed(cfg.seed, "encoder-f", 0))?;
        let g_encoder = build_encoder(arch_tag, cfg.dim, derive_seed(cfg.seed, "encoder-g", 0))?;
        let momentum = cfg.bank_momentum as f32;
        let banks = Banks {
            v: MemoryBank::new_random(target_size, cfg.dim, momentum, derive_seed(cfg.seed, "bank-v", 0))?,
            w: MemoryBank::new_random(target_size, cfg.dim, momentum, derive_seed(cfg.seed, "bank-w", 0))?,
            z: MemoryBank::new_random(background_size, cfg.dim, momentum, derive_seed(cfg.seed, "bank-z", 0))?,
        };
        let opt_f = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
        let opt_g = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
        Ok(Self {
            f_encoder,
            g_encoder,
            banks,
            stage1_done: false,
            opt_f,
            opt_g,
            history: Vec::new(),
        })
    }

    pub fn stage1_done(&self) -> bool {
        self.stage1_done
    }

    /// Marks stage 1 complete (used when restoring from a checkpoint).
    pub fn set_stage1_done(&mut self) {
        self.stage1_done = true;
        self.f_encoder.freeze();
    }

    /// Writes encoders and banks into one checkpoint pair.
    pub fn save_checkpoint(&mut self, stem: &Path, stage: &str, epoch: usize) -> Result<()> {
        let mut tensors: Vec<NamedTensor> = Vec::new();
        tensors.extend(self.f_encoder.export_tensors("f"));
        tensors.extend(self.g_encoder.export_tensors("g"));
        for (name, bank) in [
            ("bank_v", &self.banks.v),
            ("bank_w", &self.banks.w),
            ("bank_z", &self.banks.z),
        ] {
            tensors.push(NamedTensor::new(
                format!("{name}.rows"),
                vec![bank.len(), bank.dim()],
                bank.rows().iter().copied().collect(),
            ));
        }
        let meta = serde_json::json!({
            "kind": "cidfd-train-state",
            "stage": stage,
            "epoch": epoch,
            "stage1_done": self.stage1_done,
            "arch": self.f_encoder.arch().tag(),
            "d": self.f_encoder.dim(),
            "bank_momentum": self.banks.v.momentum(),
            "seed_f": self.f_encoder.seed(),
            "seed_g": self.g_encoder.seed(),
        });
        checkpoint::save_tensors(stem, &tensors, meta)
    }

    /// Restores a checkpoint written by [`TrainState::save_checkpoint`].
    pub fn load_checkpoint(stem: &Path, cfg: &TrainConfig) -> Result<Self> {
        let (tensors, meta) = checkpoint::load_tensors(stem)?;
        let arch = meta
            .get("arch")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::format(stem, "manifest lacks arch"))?;
        let dim = meta
            .get("d")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(stem, "manifest lacks d"))? as usize;
        let momentum = meta
            .get("bank_momentum")
            .and_then(|v| v.as_f64())
            .unwrap_or(cfg.bank_momentum) as f32;
        let mut f_encoder = build_encoder(arch, dim, meta["seed_f"].as_u64().unwrap_or(0))?;
        let mut g_encoder = build_encoder(arch, dim, meta["seed_g"].as_u64().unwrap_or(0))?;
        f_encoder.import_tensors("f", &tensors)?;
        g_encoder.import_tensors("g", &tensors)?;
        let bank = |name: &str| -> Result<MemoryBank<f32>> {
            let t = tensors
                .iter()
                .find(|t| t.name == format!("{name}.rows"))
                .ok_or_else(|| Error::format(stem, format!("checkpoint lacks {name}")))?;
            let rows = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::format(stem, e.to_string()))?;
            MemoryBank::from_rows(rows, momentum)
        };
        let banks = Banks {
            v: bank("bank_v")?,
            w: bank("bank_w")?,
            z: bank("bank_z")?,
        };
        let stage1_done = meta
            .get("stage1_done")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        if stage1_done {
            f_encoder.freeze();
        }
        Ok(Self {
            f_encoder,
            g_encoder,
            banks,
            stage1_done,
            opt_f: Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32),
            opt_g: Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32),
            history: Vec::new(),
        })
    }
}

/// One NDJSON record per training batch.
#[derive(Serialize)]
struct BatchRecord<'a> {
    stage: &'a str,
    epoch: usize,
    batch: usize,
    batch_size: usize,
    loss: f64,
    discrimination: f64,
    decorrelation: f64,
    lr: f64,
    timestamp: f64,
}

/// Drives the two stages over concrete datasets.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub temps: TemperatureSet<f32>,
    /// Force all pair weights to 1 (plain IDFD); stage 1 and the background
    /// branch are skipped entirely.
    pub idfd_baseline: bool,
    pub augment_policy: AugmentPolicy,
    out_dir: Option<PathBuf>,
    log: Option<fs::File>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, temps: TemperatureSet<f32>) -> Self {
        Self {
            cfg,
            temps,
            idfd_baseline: false,
            augment_policy: AugmentPolicy::crop_pad_default(),
            out_dir: None,
            log: None,
        }
    }

    /// Attaches an output directory: checkpoints, diagnostic snapshots, and
    /// an NDJSON training log land there.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("trainlog.ndjson");
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        self.out_dir = Some(dir.to_path_buf());
        self.log = Some(log);
        Ok(self)
    }

    /// Linear warmup over the leading epochs, then cosine decay to zero
    /// across the rest of the stage.
    fn schedule_lr(&self, epoch: usize, total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let warmup = self.cfg.warmup_epochs.min(total.saturating_sub(1));
        if epoch < warmup {
            return self.cfg.learning_rate * (epoch + 1) as f64 / warmup as f64;
        }
        let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
        self.cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    fn log_batch(&mut self, record: &BatchRecord<'_>) {
        if let Some(log) = &mut self.log {
            if let Ok(line) = serde_json::to_string(record) {
                let _ = writeln!(log, "{line}");
            }
        }
    }

    fn snapshot(&mut self, state: &mut TrainState, stage: u8, epoch: usize, batch: usize) -> Option<PathBuf> {
        let dir = self.out_dir.clone()?;
        let stem = dir.join(format!("diagnostic_stage{stage}"));
        state
            .save_checkpoint(&stem, &format!("diagnostic-{stage}"), epoch)
            .ok()?;
        let _ = batch;
        Some(stem)
    }

    /// Stage 1: trains the background encoder for `epochs_bg` epochs.
    /// The target encoder is untouched.
    pub fn train_background(&mut self, state: &mut TrainState, background: &Dataset) -> Result<()> {
        let cfg = self.cfg.clone();
        if background.len() != state.banks.z.len() {
            return Err(Error::ShapeMismatch(format!(
                "background dataset has {} samples but Z̄ has {} rows",
                background.len(),
                state.banks.z.len()
            )));
        }
        if cfg.batch_size > background.len() {
            return Err(Error::InvalidParameter(format!(
                "batch_size {} exceeds background dataset size {}",
                cfg.batch_size,
                background.len()
            )));
        }
        let g_checksum_before = state.g_encoder.checksum();
        for epoch in 0..cfg.epochs_bg {
            let lr = self.schedule_lr(epoch, cfg.epochs_bg);
            let order = shuffled_indices(background.len(), derive_seed(cfg.seed, "shuffle-bg", epoch as u64));
            let mut epoch_loss = 0.0f64;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let packed = self.augmented_batch(background, chunk, "augment-bg", epoch)?;
                let step = (|| -> Result<(f64, f64, f64)> {
                    let z_rows = state.f_encoder.forward_train(packed)?;
                    let z_batch = FeatureBatch::new(z_rows, chunk.to_vec())?;
                    let out = bg_total_loss(&z_batch, &state.banks.z, &self.temps)?;
                    if !out.total.is_finite() {
                        return Err(Error::DegenerateInput("non-finite loss".into()));
                    }
                    let scale = 1.0 / chunk.len() as f32;
                    let grad = out.grad.mapv(|g| g * scale);
                    state.f_encoder.backward(&grad)?;
                    state.f_encoder.clip_grad_norm(self.cfg.grad_clip as f32);
                    state.f_encoder.sgd_step(&mut state.opt_f, lr as f32);
                    state.banks.z.update(&z_batch)?;
                    Ok((
                        out.total as f64,
                        out.discrimination as f64,
                        out.decorrelation as f64,
                    ))
                })();
                let (total, disc, deco) = match step {
                    Ok(v) => v,
                    Err(Error::DegenerateInput(_)) => {
                        let snapshot = self.snapshot(state, 1, epoch, batch_idx);
                        return Err(Error::NonFiniteLoss {
                            stage: 1,
                            epoch,
                            batch: batch_idx,
                            snapshot,
                        });
                    }
                    Err(e) => return Err(e),
                };
                epoch_loss += total;
                self.log_batch(&BatchRecord {
                    stage: "bg",
                    epoch,
                    batch: batch_idx,
                    batch_size: chunk.len(),
                    loss: total,
                    discrimination: disc,
                    decorrelation: deco,
                    lr,
                    timestamp: now(),
                });
            }
            state
                .history
                .push((1, epoch, epoch_loss / background.len() as f64));
            self.periodic_checkpoint(state, "bg", epoch)?;
        }
        state.stage1_done = true;
        state.f_encoder.freeze();
        debug_assert_eq!(g_checksum_before, state.g_encoder.checksum());
        Ok(())
    }

    /// Stage 2: trains the target encoder for `epochs_tg` epochs with the
    /// background encoder frozen. With `idfd_baseline` the weights are all 1
    /// and the background branch is never evaluated.
    pub fn train_target(&mut self, state: &mut TrainState, target: &Dataset) -> Result<()> {
        let cfg = self.cfg.clone();
        if !state.stage1_done && !self.idfd_baseline {
            return Err(Error::StageOrder(
                "train_target requires a completed background stage (or the IDFD baseline)".into(),
            ));
        }
        if target.len() != state.banks.v.len() {
            return Err(Error::ShapeMismatch(format!(
                "target dataset has {} samples but V̄ has {} rows",
                target.len(),
                state.banks.v.len()
            )));
        }
        if cfg.batch_size > target.len() {
            return Err(Error::InvalidParameter(format!(
                "batch_size {} exceeds target dataset size {}",
                cfg.batch_size,
                target.len()
            )));
        }
        let use_bg = !self.idfd_baseline;
        if use_bg {
            state.f_encoder.freeze();
        }
        let frozen_checksum = state.f_encoder.checksum();

        // Cheaper desk-run variant: freeze W̄ to the clean-image embeddings
        // and reuse its rows as the per-batch background features.
        if use_bg && cfg.cache_bg_features {
            let rows = extract_feature_rows(&state.f_encoder, target, 256)?;
            state.banks.w = MemoryBank::from_rows(rows, cfg.bank_momentum as f32)?;
        }

        for epoch in 0..cfg.epochs_tg {
            let lr = self.schedule_lr(epoch, cfg.epochs_tg);
            let order = shuffled_indices(target.len(), derive_seed(cfg.seed, "shuffle-tg", epoch as u64));
            let mut epoch_loss = 0.0f64;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let packed = self.augmented_batch(target, chunk, "augment-tg", epoch)?;
                let step = (|| -> Result<(f64, f64, f64)> {
                    let w_batch = if use_bg {
                        let w_rows = if cfg.cache_bg_features {
                            state.banks.w.rows().select(Axis(0), chunk)
                        } else {
                            state.f_encoder.embed_rows(&packed)?
                        };
                        Some(FeatureBatch::new(w_rows, chunk.to_vec())?)
                    } else {
                        None
                    };
                    let v_rows = state.g_encoder.forward_train(packed)?;
                    let v_batch = FeatureBatch::new(v_rows, chunk.to_vec())?;
                    let alpha = match &w_batch {
                        Some(w) => weight_coefficients(w, &state.banks.w, self.temps.tau_xb)?,
                        None => WeightMatrix::ones(chunk.len(), state.banks.v.len()),
                    };
                    let out = tg_total_loss(&v_batch, &state.banks.v, &alpha, &self.temps)?;
                    if !out.total.is_finite() {
                        return Err(Error::DegenerateInput("non-finite loss".into()));
                    }
                    let scale = 1.0 / chunk.len() as f32;
                    let grad = out.grad.mapv(|g| g * scale);
                    state.g_encoder.backward(&grad)?;
                    state.g_encoder.clip_grad_norm(self.cfg.grad_clip as f32);
                    state.g_encoder.sgd_step(&mut state.opt_g, lr as f32);
                    state.banks.v.update(&v_batch)?;
                    if let Some(w) = &w_batch {
                        if !cfg.cache_bg_features {
                            state.banks.w.update(w)?;
                        }
                    }
                    Ok((
                        out.total as f64,
                        out.discrimination as f64,
                        out.decorrelation as f64,
                    ))
                })();
                let (total, disc, deco) = match step {
                    Ok(v) => v,
                    Err(Error::DegenerateInput(_)) => {
                        let snapshot = self.snapshot(state, 2, epoch, batch_idx);
                        return Err(Error::NonFiniteLoss {
                            stage: 2,
                            epoch,
                            batch: batch_idx,
                            snapshot,
                        });
                    }
                    Err(e) => return Err(e),
                };
                epoch_loss += total;
                self.log_batch(&BatchRecord {
                    stage: "tg",
                    epoch,
                    batch: batch_idx,
                    batch_size: chunk.len(),
                    loss: total,
                    discrimination: disc,
                    decorrelation: deco,
                    lr,
                    timestamp: now(),
                });
            }
            if use_bg && state.f_encoder.checksum() != frozen_checksum {
                return Err(Error::StageOrder(
                    "frozen background encoder changed during stage 2".into(),
                ));
            }
            state
                .history
                .push((2, epoch, epoch_loss / target.len() as f64));
            self.periodic_checkpoint(state, "tg", epoch)?;
        }
        Ok(())
    }

    fn augmented_batch(
        &self,
        data: &Dataset,
        chunk: &[usize],
        tag: &str,
        epoch: usize,
    ) -> Result<crate::nn::FeatureMap> {
        let mut views = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let seed = derive_seed(
                self.cfg.seed,
                tag,
                (epoch as u64) * (data.len() as u64) + i as u64,
            );
            views.push(augment(&data.images[i], self.augment_policy, seed)?);
        }
        let (h, w, c) = data.spec.shape;
        pack_images(views.iter(), (h, w, c))
    }

    fn periodic_checkpoint(&mut self, state: &mut TrainState, stage: &str, epoch: usize) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        if every == 0 {
            return Ok(());
        }
        if let Some(dir) = self.out_dir.clone() {
            if (epoch + 1) % every == 0 {
                let stem = dir.join(format!("{stage}_epoch{:04}", epoch + 1));
                state.save_checkpoint(&stem, stage, epoch + 1)?;
            }
        }
        Ok(())
    }
}

/// Embeds the full dataset in order (no augmentation, inference mode),
/// returning one unit-norm row per sample.
pub fn extract_features(encoder: &Encoder, data: &Dataset, batch_size: usize) -> Result<FeatureBatch<f32>> {
    let rows = extract_feature_rows(encoder, data, batch_size)?;
    let n = rows.nrows();
    FeatureBatch::new(rows, (0..n).collect())
}

fn extract_feature_rows(encoder: &Encoder, data: &Dataset, batch_size: usize) -> Result<Array2<f32>> {
    let (h, w, c) = data.spec.shape;
    let mut rows = Array2::<f32>::zeros((data.len(), encoder.dim()));
    let mut start = 0usize;
    while start < data.len() {
        let stop = (start + batch_size.max(1)).min(data.len());
        let packed = pack_images(data.images[start..stop].iter(), (h, w, c))?;
        let out = encoder.embed_rows(&packed)?;
        rows.slice_mut(ndarray::s![start..stop, ..]).assign(&out);
        start = stop;
    }
    Ok(rows)
}

fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
