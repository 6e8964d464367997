//! Training loop: deblur-then-re-deblur supervision with the combined loss.
//!
//! Each step builds the autodiff graph for `deblur_times` chained passes of
//! `iters` unit iterations, attaches the sharp and idempotence losses to the
//! pass outputs, backpropagates through everything (no stop-gradient between
//! passes) and applies one Adam update. Runs are deterministic functions of
//! the config: data order, augmentation draws and initialization all derive
//! from `cfg.seed`.

use crate::data::{crop_and_augment, normalize, BlurPair};
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::graph::Graph;
use crate::loss::{LossWeights, Reduction};
use crate::net::{self, ModelParams, Widths};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{stack_batch, Scalar, Tensor};
use crate::data::denormalize_clipped;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub widths: Widths,
    /// Unit iterations per pass (N).
    pub iters: usize,
    /// Deblurring passes per step (deblur + re-deblur).
    pub deblur_times: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_decay_every: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps (stops mid-epoch).
    pub max_steps: Option<usize>,
    /// Per-pass sharp-loss weights; length must equal `deblur_times`.
    pub alpha: Vec<f64>,
    pub lambda_idem: f64,
    pub reduction: Reduction,
    pub seed: u64,
    /// Training patch size (crop + dihedral + saturation augmentation).
    pub patch: usize,
    pub sat_range: (f64, f64),
    /// Fraction of pairs held out for validation.
    pub val_fraction: f64,
    /// Validate every this many epochs (and always at the end).
    pub val_every: usize,
    /// Write `last.ckpt` every this many epochs when an output dir is given.
    pub checkpoint_every: usize,
    /// Print one line per validation to stdout.
    pub verbose: bool,
}

impl Default for TrainConfig {
    /// Paper-flavored recipe scaled to desk size: N = 6, two passes,
    /// alpha = (1, 1), lambda = 0.1, Adam at 1e-4 halving every 500 epochs.
    fn default() -> Self {
        TrainConfig {
            widths: Widths::default(),
            iters: 6,
            deblur_times: 2,
            batch_size: 4,
            lr0: 1e-4,
            lr_decay_every: 500,
            adam: AdamConfig::default(),
            epochs: 50,
            max_steps: None,
            alpha: vec![1.0, 1.0],
            lambda_idem: 0.1,
            reduction: Reduction::Mean,
            seed: 0,
            patch: 64,
            sat_range: (0.8, 1.2),
            val_fraction: 0.2,
            val_every: 1,
            checkpoint_every: 10,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::Config("iters (N) must be >= 1".into()));
        }
        if self.deblur_times < 1 {
            return Err(Error::Config("deblur_times must be >= 1".into()));
        }
        if self.lambda_idem > 0.0 && self.deblur_times < 2 {
            return Err(Error::Config(
                "the idempotent loss needs deblur_times >= 2".into(),
            ));
        }
        if self.alpha.len() != self.deblur_times {
            return Err(Error::Config(format!(
                "alpha has {} entries but deblur_times is {}",
                self.alpha.len(),
                self.deblur_times
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.patch % 4 != 0 || self.patch == 0 {
            return Err(Error::Config("patch must be a positive multiple of 4".into()));
        }
        if self.val_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("val_every/checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    fn loss_weights<S: Scalar>(&self) -> LossWeights<S> {
        LossWeights {
            alpha: self.alpha.iter().map(|&a| S::from_f64(a)).collect(),
            lambda_idem: S::from_f64(self.lambda_idem),
            reduction: self.reduction,
        }
    }

    /// Hash of the fields that must not change across a resume. The
    /// continuation knobs (`epochs`, `max_steps`) are deliberately excluded.
    pub fn structural_hash(&self) -> u64 {
        let mut probe = self.clone();
        probe.epochs = 0;
        probe.max_steps = None;
        probe.verbose = false;
        fnv1a64(serde_json::to_string(&probe).expect("config serializes").as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Scalars logged for every optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub total: f64,
    pub idem: f64,
    pub sharp: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a normalized batch. Builds the graph, runs the
/// passes, backpropagates and applies Adam. Aborts (without touching the
/// parameters) if the loss is non-finite.
pub fn train_step<S: Scalar>(
    params: &mut ModelParams<S>,
    opt: &mut Adam<S>,
    blurry: &Tensor<S>,
    sharp: &Tensor<S>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let bound = net::bind_params(&mut g, params);
    let input = g.leaf(blurry.clone(), false);
    let target = g.leaf(sharp.clone(), false);
    let passes = net::re_deblur_graph(
        &mut g,
        &bound,
        params.widths,
        input,
        cfg.deblur_times,
        cfg.iters,
    );
    let finals: Vec<_> = passes.iter().map(|p| p.final_image()).collect();
    let loss_nodes = net::total_loss_graph(&mut g, &finals, target, &cfg.loss_weights::<S>())?;

    let total = g.value(loss_nodes.total).item().into_f64();
    let sharp_v = g.value(loss_nodes.sharp).item().into_f64();
    let idem_v = match loss_nodes.idem {
        Some(id) => g.value(id).item().into_f64(),
        None => 0.0,
    };
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {total} (sharp {sharp_v}, idem {idem_v}) on batch {:?} at lr {lr}",
            blurry.shape()
        )));
    }

    let mut grads = g.backward(loss_nodes.total);
    let flat = net::collect_param_grads(params, &bound, &mut grads);
    drop(g);
    let grad_norm = flat
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.into_f64() * v.into_f64())
        .sum::<f64>()
        .sqrt();
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &flat, lr);
    Ok(StepMetrics {
        total,
        idem: idem_v,
        sharp: sharp_v,
        grad_norm,
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub epoch: usize,
    pub psnr: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar> {
    pub params: ModelParams<S>,
    pub adam_m: Vec<Tensor<S>>,
    pub adam_v: Vec<Tensor<S>>,
    pub adam_t: u64,
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    pub history: Vec<ValPoint>,
}

const CKPT_MAGIC: &[u8; 8] = b"IDBLUR01";

#[derive(serde::Serialize, serde::Deserialize)]
struct CkptHeader {
    dtype: String,
    config: TrainConfig,
    config_hash: u64,
    epoch: usize,
    step: usize,
    adam_t: u64,
    history: Vec<ValPoint>,
    tensor_shapes: Vec<[usize; 4]>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(cfg.widths, cfg.seed)?;
        let shapes: Vec<[usize; 4]> = params.tensors().iter().map(|t| t.shape()).collect();
        Ok(Checkpoint {
            adam_m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            adam_v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            adam_t: 0,
            epoch: 0,
            step: 0,
            config: cfg.clone(),
            history: Vec::new(),
            params,
        })
    }

    /// Bit-exact binary container: magic, JSON header, raw little-endian
    /// tensor payload (params, then Adam m, then Adam v, canonical order).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<&Tensor<S>> = self
            .params
            .tensors()
            .into_iter()
            .chain(self.adam_m.iter())
            .chain(self.adam_v.iter())
            .collect();
        let header = CkptHeader {
            dtype: S::DTYPE.to_string(),
            config: self.config.clone(),
            config_hash: self.config.structural_hash(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam_t,
            history: self.history.clone(),
            tensor_shapes: tensors.iter().map(|t| t.shape()).collect(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + header_json.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Config(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: CkptHeader = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::Config(format!("corrupt checkpoint header: {e}")))?;
        if header.dtype != S::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint dtype {} does not match requested {}",
                header.dtype,
                S::DTYPE
            )));
        }
        let mut params = ModelParams::<S>::init(header.config.widths, 0)?;
        let n_params = params.tensors().len();
        if header.tensor_shapes.len() != 3 * n_params {
            return Err(Error::Config("checkpoint tensor count mismatch".into()));
        }
        let mut offset = 16 + hlen;
        let mut read_tensor = |shape: [usize; 4]| -> Result<Tensor<S>> {
            let n: usize = shape.iter().product();
            let end = offset + n * S::BYTES;
            if end > bytes.len() {
                return Err(Error::Config("checkpoint payload truncated".into()));
            }
            let data: Vec<S> = bytes[offset..end]
                .chunks_exact(S::BYTES)
                .map(S::read_le)
                .collect();
            offset = end;
            Ok(Tensor::new(shape, data))
        };
        let shapes = header.tensor_shapes.clone();
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            let loaded = read_tensor(shapes[i])?;
            if loaded.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {i} shape {:?} does not match model {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        let mut adam_m = Vec::with_capacity(n_params);
        for i in 0..n_params {
            adam_m.push(read_tensor(shapes[n_params + i])?);
        }
        let mut adam_v = Vec::with_capacity(n_params);
        for i in 0..n_params {
            adam_v.push(read_tensor(shapes[2 * n_params + i])?);
        }
        Ok(Checkpoint {
            params,
            adam_m,
            adam_v,
            adam_t: header.adam_t,
            epoch: header.epoch,
            step: header.step,
            config: header.config,
            history: header.history,
        })
    }

    /// Error if `cfg` structurally differs from the checkpoint's config.
    pub fn check_resume(&self, cfg: &TrainConfig) -> Result<()> {
        if self.config.structural_hash() != cfg.structural_hash() {
            return Err(Error::Config(
                "config hash mismatch: checkpoint was trained with a different configuration"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    /// Full metrics log (`step,epoch,lr,total,idem,sharp,val_psnr`).
    pub metrics_csv: String,
    pub best_val_psnr: Option<f64>,
}

/// Train from scratch. See [`train_resume`] to continue a run.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    pairs: &[BlurPair],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let start = Checkpoint::fresh(cfg)?;
    run(cfg, pairs, out_dir, start)
}

/// Continue from a checkpoint; the structural config must match.
pub fn train_resume<S: Scalar>(
    cfg: &TrainConfig,
    pairs: &[BlurPair],
    out_dir: Option<&Path>,
    from: Checkpoint<S>,
) -> Result<TrainOutcome<S>> {
    from.check_resume(cfg)?;
    run(cfg, pairs, out_dir, from)
}

/// Deterministic train/val split of pair indices.
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0051ee7u64);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn validation_psnr<S: Scalar>(
    params: &ModelParams<S>,
    pairs: &[BlurPair],
    val_idx: &[usize],
    n: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for &i in val_idx {
        let pair = &pairs[i];
        let input = normalize(&pair.blurry).cast::<S>();
        let trace = params.progressive_deblur(&input, n)?;
        let out32 = trace.final_image().cast::<f32>();
        acc += psnr(&denormalize_clipped(&out32), &pair.sharp)?;
    }
    Ok(acc / val_idx.len() as f64)
}

fn run<S: Scalar>(
    cfg: &TrainConfig,
    pairs: &[BlurPair],
    out_dir: Option<&Path>,
    start: Checkpoint<S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training needs a non-empty dataset".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (train_idx, val_idx) = split_indices(pairs.len(), cfg.val_fraction, cfg.seed);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} pairs, smaller than one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }

    let mut ckpt = start;
    let mut opt = Adam::new(cfg.adam, &shapes_of(&ckpt.params));
    opt.m = ckpt.adam_m.clone();
    opt.v = ckpt.adam_v.clone();
    opt.t = ckpt.adam_t;

    let mut csv = String::from("step,epoch,lr,total,idem,sharp,val_psnr\n");
    let mut best_val: Option<f64> = ckpt
        .history
        .iter()
        .map(|p| p.psnr)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))));
    let steps_per_epoch = train_idx.len() / cfg.batch_size;
    let mut done = cfg.max_steps.is_some_and(|m| ckpt.step >= m);

    let mut epoch = ckpt.epoch;
    while epoch < cfg.epochs && !done {
        let lr = crate::optim::lr_schedule(cfg.lr0, cfg.lr_decay_every, epoch);
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x01, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for bi in 0..steps_per_epoch {
            let items = &order[bi * cfg.batch_size..(bi + 1) * cfg.batch_size];
            let mut blurry_items = Vec::with_capacity(items.len());
            let mut sharp_items = Vec::with_capacity(items.len());
            for (k, &pi) in items.iter().enumerate() {
                let aug_seed = mix(cfg.seed, 0x02, ((epoch * steps_per_epoch + bi) * cfg.batch_size + k) as u64);
                let aug = crop_and_augment(
                    &pairs[pi],
                    cfg.patch.min(pairs[pi].blurry.height()).min(pairs[pi].blurry.width()) / 4 * 4,
                    aug_seed,
                    (cfg.sat_range.0 as f32, cfg.sat_range.1 as f32),
                )?;
                blurry_items.push(normalize(&aug.blurry).cast::<S>());
                sharp_items.push(normalize(&aug.sharp).cast::<S>());
            }
            let blurry = stack_batch(&blurry_items.iter().collect::<Vec<_>>());
            let sharp = stack_batch(&sharp_items.iter().collect::<Vec<_>>());

            let metrics = train_step(&mut ckpt.params, &mut opt, &blurry, &sharp, cfg, lr)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "step {} (epoch {epoch}, batch {bi}, seed {}): {msg}",
                        ckpt.step + 1,
                        cfg.seed
                    )),
                    other => other,
                })?;
            ckpt.step += 1;

            let is_last_in_epoch = bi + 1 == steps_per_epoch;
            let hit_cap = cfg.max_steps.is_some_and(|m| ckpt.step >= m);
            let validate_now = !val_idx.is_empty()
                && (hit_cap
                    || (is_last_in_epoch
                        && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs)));
            let mut val_field = String::new();
            if validate_now {
                let vp = validation_psnr(&ckpt.params, pairs, &val_idx, cfg.iters)?;
                ckpt.history.push(ValPoint {
                    step: ckpt.step,
                    epoch,
                    psnr: vp,
                });
                val_field = format!("{vp:.6}");
                if cfg.verbose {
                    println!(
                        "step {:>6}  epoch {:>4}  lr {:.2e}  loss {:.6}  val {:.3} dB",
                        ckpt.step, epoch, lr, metrics.total, vp
                    );
                }
                let improved = best_val.is_none_or(|b| vp > b);
                if improved {
                    best_val = Some(vp);
                    if let Some(dir) = out_dir {
                        sync_opt_into(&mut ckpt, &opt);
                        ckpt.epoch = epoch + 1;
                        ckpt.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{}\n",
                ckpt.step, epoch, lr, metrics.total, metrics.idem, metrics.sharp, val_field
            ));
            if hit_cap {
                done = true;
                break;
            }
        }
        epoch += 1;
        ckpt.epoch = epoch;
        if let Some(dir) = out_dir {
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs || done {
                sync_opt_into(&mut ckpt, &opt);
                ckpt.save(&dir.join("last.ckpt"))?;
                std::fs::write(dir.join("metrics.csv"), &csv)
                    .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
            }
        }
    }

    sync_opt_into(&mut ckpt, &opt);
    if let Some(dir) = out_dir {
        ckpt.save(&dir.join("last.ckpt"))?;
        std::fs::write(dir.join("metrics.csv"), &csv)
            .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics_csv: csv,
        best_val_psnr: best_val,
    })
}

fn shapes_of<S: Scalar>(params: &ModelParams<S>) -> Vec<[usize; 4]> {
    params.tensors().iter().map(|t| t.shape()).collect()
}

fn sync_opt_into<S: Scalar>(ckpt: &mut Checkpoint<S>, opt: &Adam<S>) {
    ckpt.adam_m = opt.m.clone();
    ckpt.adam_v = opt.v.clone();
    ckpt.adam_t = opt.t;
}

/// Cheap deterministic mixing of run seed, stream tag and index.
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(24);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&tag.to_le_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}
