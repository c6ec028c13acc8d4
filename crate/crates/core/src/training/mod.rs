//! Losses, Adam, the training loop and the gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod losses;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use losses::{
    color_loss, color_loss_grad, depth_loss, depth_loss_grad, total_loss, DepthLoss, LossParts, LossWeights,
};

use crate::checkpoint::{save_checkpoint, Model};
use crate::decoder::{init_decoder, DecoderConfig, DecoderParams};
use crate::error::{invalid, Error, Result};
use crate::field::{init_planes, FeaturePlaneSet, PlaneConfig, RegularizerTerms};
use crate::renderer::{make_ray, trace_rays, Ray, RayCotangent};
use crate::rng;
use crate::sampler::{draw_rays, ClampMode, ImportanceMaps, SamplerConfig};
use crate::scene_io::{metric_depth_to_ray_depth, Dataset, RayDepthTargets};

/// Rays traced together in one forward/backward pass.
const CHUNK_RAYS: usize = 64;
/// Chunks in flight at once; bounds memory, never affects results.
const WAVE_CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub sampler: SamplerConfig,
    pub planes: PlaneConfig,
    pub decoder: DecoderConfig,
    /// Draw rays from the importance maps; otherwise uniformly over all pixels.
    pub use_isdm: bool,
    pub cosine_decay: bool,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_rays: 2048,
            learning_rate: 0.01,
            adam: AdamConfig::default(),
            n_samples: 128,
            seed: 0,
            loss_weights: LossWeights::default(),
            sampler: SamplerConfig {
                clamp_mode: ClampMode::Max,
                ..SamplerConfig::default()
            },
            planes: PlaneConfig::default(),
            decoder: DecoderConfig::default(),
            use_isdm: true,
            cosine_decay: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.batch_rays < 1 || self.n_samples < 1 {
            return Err(Error::Config("iterations, batch_rays and n_samples must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.adam.validate()?;
        self.loss_weights.validate()?;
        self.sampler.validate()?;
        self.planes.validate()?;
        self.decoder.validate()
    }

    /// Depth-loss ablation.
    pub fn without_depth_loss(mut self) -> Self {
        self.loss_weights.lambda1 = 0.0;
        self
    }

    /// Keeps only the finest plane scale.
    pub fn single_scale(mut self) -> Self {
        if let Some(&finest) = self.planes.scales.last() {
            self.planes.scales = vec![finest];
        }
        self
    }

    fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.cosine_decay {
            let f = iteration as f64 / self.iterations as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * f).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Fresh model for `config`, deterministic in its seed.
pub fn init_model(config: &TrainConfig) -> Result<Model> {
    let planes = init_planes(&config.planes, rng::derive_seed(config.seed, &[1]))?;
    let decoder = init_decoder(&config.decoder, planes.fused_width(), rng::derive_seed(config.seed, &[2]))?;
    Ok(Model { planes, decoder })
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub color: f64,
    pub depth: f64,
    pub tv2d: f64,
    pub tv1d: f64,
    pub smooth: f64,
    pub total: f64,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "iteration,L_color,L_depth,L_TV2D,L_TV1D,L_smooth,total,wall_ms";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iteration, self.color, self.depth, self.tv2d, self.tv1d, self.smooth, self.total, self.wall_ms
        )
    }
}

/// Rays and targets of one training step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frame: usize,
    pub rays: Vec<Ray>,
    pub jitter: Vec<u64>,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Parameter gradients, shaped like the model.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub planes: FeaturePlaneSet,
    pub decoder: DecoderParams,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            planes: model.planes.zeros_like(),
            decoder: model.decoder.zeros_like(),
        }
    }

    fn clear(&mut self) {
        self.planes.fill(0.0);
        for l in self.decoder.layers_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }
}

fn tensors_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = model.planes.planes_mut().map(|(_, _, p)| p.data_mut()).collect();
    for l in model.decoder.layers_mut() {
        out.push(l.weight.as_mut_slice());
        out.push(l.bias.as_mut_slice());
    }
    out
}

fn tensors<'a>(planes: &'a FeaturePlaneSet, decoder: &'a DecoderParams) -> Vec<&'a [f64]> {
    let mut out: Vec<&[f64]> = planes.planes().map(|(_, _, p)| p.data()).collect();
    for l in decoder.layers() {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    out
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    model: Model,
    grad: Option<Gradients>,
    adam: AdamState,
    maps: Option<ImportanceMaps>,
    frames: Vec<usize>,
    targets: Vec<RayDepthTargets>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let model = init_model(&config)?;
        Self::with_model(dataset, config, model)
    }

    pub fn with_model(dataset: &'a Dataset, config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let maps = if config.use_isdm {
            Some(ImportanceMaps::build(&dataset.frames, &dataset.masks, &config.sampler)?)
        } else {
            None
        };
        let frames: Vec<usize> = match &maps {
            Some(m) => (0..dataset.len()).filter(|&i| m.pmfs[i].is_some()).collect(),
            None => (0..dataset.len()).collect(),
        };
        if frames.is_empty() {
            return Err(Error::DegenerateFrame { frame: 0 });
        }
        let targets = dataset
            .depths
            .iter()
            .map(|d| metric_depth_to_ray_depth(d, &dataset.camera))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(tensors(&model.planes, &model.decoder).iter().map(|t| t.len()));
        Ok(Self {
            config,
            dataset,
            model,
            grad: None,
            adam,
            maps,
            frames,
            targets,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn importance_maps(&self) -> Option<&ImportanceMaps> {
        self.maps.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The batch used at `iteration`: a uniformly chosen frame, then
    /// pixels drawn from its importance map (or uniformly).
    pub fn batch(&self, iteration: usize) -> Result<Batch> {
        let seed = self.config.seed;
        let it = iteration as u64;
        let mut pick = rng::stream(seed, &[0xF4A3, it]);
        let frame = self.frames[pick.gen_range(0..self.frames.len())];
        let cam = &self.dataset.camera;
        let r = self.config.batch_rays;
        let pixels = match &self.maps {
            Some(m) => draw_rays(
                m.pmfs[frame].as_ref().expect("usable frames have a pmf"),
                r,
                rng::derive_seed(seed, &[0xB47C, it]),
            ),
            None => {
                let mut g = rng::stream(seed, &[0x0A1F, it]);
                (0..r).map(|_| g.gen_range(0..cam.num_pixels())).collect()
            }
        };
        let t = self.dataset.times[frame];
        let img = &self.dataset.frames[frame];
        let tg = &self.targets[frame];
        let mut batch = Batch {
            frame,
            rays: Vec::with_capacity(r),
            jitter: Vec::with_capacity(r),
            color: Vec::with_capacity(r),
            depth: Vec::with_capacity(r),
            valid: Vec::with_capacity(r),
        };
        for (k, &p) in pixels.iter().enumerate() {
            let (row, col) = (p / cam.width, p % cam.width);
            batch.rays.push(make_ray(cam, (row, col), t)?);
            batch.jitter.push(rng::derive_seed(seed, &[0x5A3B, it, k as u64, p as u64]));
            batch.color.push(img.pixels()[p]);
            batch.depth.push(tg.values.values()[p]);
            batch.valid.push(tg.valid.values()[p] > 0.5);
        }
        Ok(batch)
    }

    /// Loss of `model` on `batch`; gradients are written to `grad` when given.
    pub fn evaluate(&self, model: &Model, batch: &Batch, grad: Option<&mut Gradients>) -> Result<LossParts> {
        evaluate(model, batch, &self.config, grad)
    }

    /// One full optimization step.
    pub fn step(&mut self) -> Result<IterationLog> {
        let start = Instant::now();
        let it = self.iteration;
        let batch = self.batch(it)?;
        let mut grad = self.grad.take().unwrap_or_else(|| Gradients::zeros_like(&self.model));
        grad.clear();
        let parts = evaluate(&self.model, &batch, &self.config, Some(&mut grad));
        let parts = match parts {
            Ok(p) => p,
            Err(e) => {
                self.grad = Some(grad);
                return Err(e);
            }
        };
        let total = total_loss(&parts, &self.config.loss_weights);
        if !total.is_finite() {
            self.grad = Some(grad);
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("frame {}, terms {parts:?}", batch.frame),
            });
        }
        let lr = self.config.learning_rate_at(it);
        {
            let g = tensors(&grad.planes, &grad.decoder);
            let mut p = tensors_mut(&mut self.model);
            let skipped = adam_step(&mut p, &g, &mut self.adam, lr, &self.config.adam)?;
            if !skipped.is_empty() {
                log::warn!("iteration {it}: skipped {} tensors with non-finite gradients", skipped.len());
            }
        }
        self.grad = Some(grad);
        self.iteration += 1;
        Ok(IterationLog {
            iteration: it,
            color: parts.color,
            depth: parts.depth,
            tv2d: parts.tv2d,
            tv1d: parts.tv1d,
            smooth: parts.smooth,
            total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

struct ChunkOut {
    color_sum: f64,
    depth_sum: f64,
    decoder: Option<DecoderParams>,
    field: Option<(crate::renderer::RayBatchTrace, crate::renderer::FieldCotangents)>,
}

/// Loss terms of `model` on `batch`. Rays are processed in fixed chunks and
/// gradients are reduced in chunk order, so the result does not depend on the
/// number of worker threads.
pub fn evaluate(model: &Model, batch: &Batch, config: &TrainConfig, mut grad: Option<&mut Gradients>) -> Result<LossParts> {
    let r = batch.rays.len();
    if r == 0 {
        return Err(invalid("empty batch"));
    }
    let n_valid = batch.valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        log::warn!("batch has no valid depth targets; depth loss is 0");
    }
    let w = &config.loss_weights;
    let want_grad = grad.is_some();
    let chunks: Vec<(usize, usize)> = (0..r)
        .step_by(CHUNK_RAYS)
        .map(|lo| (lo, (lo + CHUNK_RAYS).min(r)))
        .collect();
    let mut color_sum = 0.0;
    let mut depth_sum = 0.0;
    for wave in chunks.chunks(WAVE_CHUNKS) {
        let outs = wave
            .par_iter()
            .map(|&(lo, hi)| -> Result<ChunkOut> {
                let trace = trace_rays(
                    &model.planes,
                    &model.decoder,
                    &batch.rays[lo..hi],
                    config.n_samples,
                    Some(&batch.jitter[lo..hi]),
                )?;
                let mut cs = 0.0;
                let mut ds = 0.0;
                let mut cots = Vec::with_capacity(hi - lo);
                for (k, res) in trace.results().iter().enumerate() {
                    let i = lo + k;
                    let target = batch.color[i];
                    let dc: [f64; 3] = std::array::from_fn(|c| res.color[c] - target[c]);
                    cs += dc.iter().map(|d| d * d).sum::<f64>();
                    let mut cot = RayCotangent {
                        color: dc.map(|d| 2.0 * d / r as f64),
                        ..RayCotangent::default()
                    };
                    if batch.valid[i] {
                        let dd = res.depth - batch.depth[i];
                        ds += dd * dd;
                        cot.depth = w.lambda1 * 2.0 * dd / n_valid as f64;
                    }
                    cots.push(cot);
                }
                if !want_grad {
                    return Ok(ChunkOut {
                        color_sum: cs,
                        depth_sum: ds,
                        decoder: None,
                        field: None,
                    });
                }
                let mut dg = model.decoder.zeros_like();
                let fc = trace.backward(&model.planes, &model.decoder, &cots, &mut dg)?;
                Ok(ChunkOut {
                    color_sum: cs,
                    depth_sum: ds,
                    decoder: Some(dg),
                    field: Some((trace, fc)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for out in outs {
            color_sum += out.color_sum;
            depth_sum += out.depth_sum;
            if let Some(g) = grad.as_deref_mut() {
                if let Some(dg) = &out.decoder {
                    g.decoder.add_scaled(dg, 1.0);
                }
                if let Some((trace, fc)) = &out.field {
                    trace.scatter_field(&model.planes, fc, &mut g.planes);
                }
            }
        }
    }
    let reg = model.planes.regularizers()?;
    if let Some(g) = grad {
        model.planes.regularizer_grads(
            RegularizerTerms {
                tv2d: w.lambda2,
                tv1d: w.lambda3,
                smooth: w.lambda4,
            },
            &mut g.planes,
        )?;
    }
    Ok(LossParts {
        color: color_sum / r as f64,
        depth: if n_valid > 0 { depth_sum / n_valid as f64 } else { 0.0 },
        tv2d: reg.tv2d,
        tv1d: reg.tv1d,
        smooth: reg.smooth,
    })
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Recorded in the checkpoint's config echo.
    pub run_info: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<IterationLog>,
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.partial"))
}

/// Runs `config.iterations` steps. The CSV log is appended row by row to a
/// temporary file that is renamed into place when training ends.
pub fn train(dataset: &Dataset, config: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    let mut csv = match &outputs.log_csv {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let tmp = temp_sibling(p);
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            writeln!(w, "{LOG_HEADER}")?;
            Some((w, tmp, p.clone()))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(ck) = &outputs.checkpoint {
                    let dump = ck.with_extension("nonfinite.ckpt");
                    log::error!("{e}; dumping state to {}", dump.display());
                    save_checkpoint(&dump, trainer.model(), &outputs.run_info)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((w, _, _)) = csv.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        if row.iteration % 100 == 0 {
            log::info!("iteration {} total {:.6} color {:.6}", row.iteration, row.total, row.color);
        }
        log.push(row);
        let done = trainer.iteration();
        if let Some(ck) = &outputs.checkpoint {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
                save_checkpoint(ck, trainer.model(), &outputs.run_info)?;
            }
        }
    }
    if let Some((mut w, tmp, path)) = csv {
        w.flush()?;
        drop(w);
        fs::rename(tmp, path)?;
    }
    if let Some(ck) = &outputs.checkpoint {
        save_checkpoint(ck, trainer.model(), &outputs.run_info)?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}
