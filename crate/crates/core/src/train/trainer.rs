use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::detector::{encode, Anchor, Detection, Detector, PostprocessOptions};
use crate::error::{Result, SacError};
use crate::params::{seeded_rng, Graph, ParamStore};
use crate::real::Real;
use crate::tape::{FocalParams, Target, Var};
use crate::tensor::Tensor;
use crate::weights::save_weights;

use super::assign::{assign_anchors, AnchorLabel};
use super::data::Dataset;
use super::eval::{evaluate_map, EvalReport};
use super::sgd::Sgd;

/// Per-anchor targets of a batch, laid out like the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    /// `N * A * K` class targets.
    pub classes: Vec<Target>,
    /// `N * A * 4` encoded box deltas.
    pub deltas: Vec<f64>,
    pub box_mask: Vec<bool>,
    pub positives: usize,
}

/// Assigns anchors for each image in `indices` and encodes the box targets.
pub fn build_targets(ds: &Dataset, indices: &[usize], anchors: &[Anchor], num_classes: usize) -> BatchTargets {
    let a = anchors.len();
    let boxes: Vec<_> = anchors.iter().map(Anchor::bbox).collect();
    let mut t = BatchTargets {
        classes: Vec::with_capacity(indices.len() * a * num_classes),
        deltas: Vec::with_capacity(indices.len() * a * 4),
        box_mask: Vec::with_capacity(indices.len() * a * 4),
        positives: 0,
    };
    for &i in indices {
        let objects = &ds.records[i].objects;
        let gts = ds.boxes(i);
        for (label, anchor) in assign_anchors(&boxes, &gts).into_iter().zip(anchors) {
            match label {
                AnchorLabel::Positive(g) => {
                    t.positives += 1;
                    for k in 0..num_classes {
                        t.classes.push(if k == objects[g].class { Target::Positive } else { Target::Negative });
                    }
                    t.deltas.extend(encode(&gts[g], anchor));
                    t.box_mask.extend([true; 4]);
                }
                AnchorLabel::Negative => {
                    t.classes.extend(std::iter::repeat(Target::Negative).take(num_classes));
                    t.deltas.extend([0.0; 4]);
                    t.box_mask.extend([false; 4]);
                }
                AnchorLabel::Ignore => {
                    t.classes.extend(std::iter::repeat(Target::Ignore).take(num_classes));
                    t.deltas.extend([0.0; 4]);
                    t.box_mask.extend([false; 4]);
                }
            }
        }
    }
    t
}

/// Focal and box losses on the tape, both normalized by the number of
/// positive anchors. Returns `(total, focal, box)`.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    cls: Var,
    reg: Var,
    targets: &BatchTargets,
    focal: FocalParams,
    box_beta: f64,
    box_weight: f64,
) -> Result<(Var, Var, Var)> {
    let norm = targets.positives.max(1) as f64;
    let f = g.tape.focal_loss(cls, targets.classes.clone(), focal, norm)?;
    let b = g
        .tape
        .smooth_l1(reg, targets.deltas.clone(), targets.box_mask.clone(), box_beta, norm)?;
    let wb = g.tape.scale(b, box_weight);
    let total = g.tape.add(f, wb)?;
    Ok((total, f, b))
}

pub(crate) fn batch_images<T: Real>(ds: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(indices.len() * ds.channels * ds.size * ds.size);
    for &i in indices {
        data.extend(ds.images[i].iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::from_vec([indices.len(), ds.channels, ds.size, ds.size], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub focal: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (non-finite loss); last finite step: {last_finite:?}")]
    Diverged { step: usize, last_finite: Option<usize> },
    #[error(transparent)]
    Other(#[from] SacError),
}

pub struct TrainOutcome<T: Real> {
    pub model: Detector<T>,
    pub records: Vec<StepRecord>,
}

fn write_line(file: &mut Option<fs::File>, path: &Path, rec: &StepRecord) -> Result<()> {
    if let Some(f) = file {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| SacError::io(path, e))?;
    }
    Ok(())
}

/// Trains a freshly initialized detector on `ds`.
///
/// With `out_dir`, writes `config.json`, `metrics.jsonl`, periodic
/// `checkpoint_eNNN.sacw` files and `final.sacw`.
pub fn train<T: Real>(
    cfg: &RunConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    if ds.size != model_cfg.input_size || ds.channels != model_cfg.in_channels {
        return Err(SacError::Invalid(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            ds.channels, ds.size, ds.size, model_cfg.in_channels, model_cfg.input_size, model_cfg.input_size
        ))
        .into());
    }
    let mut model = Detector::<T>::new(model_cfg, cfg.train.seed)?;
    let anchors = model.anchors();
    let k = model.config.num_classes;
    let mut opt = Sgd::new(cfg.sgd(), &model.store);
    let schedule = cfg.schedule();
    let focal = cfg.focal();

    let metrics_path = out_dir.map(|d| d.join("metrics.jsonl"));
    let mut metrics = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| SacError::io(dir, e))?;
        let cp = dir.join("config.json");
        fs::write(&cp, cfg.to_json()).map_err(|e| SacError::io(&cp, e))?;
        let mp = metrics_path.as_ref().unwrap();
        metrics = Some(fs::File::create(mp).map_err(|e| SacError::io(mp, e))?);
    }

    let mut records = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut seeded_rng(cfg.train.seed, 1 + epoch as u64));
        for batch in order.chunks(cfg.train.batch_size) {
            let lr = schedule.at(step);
            let images = batch_images::<T>(ds, batch)?;
            let targets = build_targets(ds, batch, &anchors, k);
            let mut g = model.store.bind(true);
            let x = g.tape.constant(images);
            let (cls, reg) = model.forward(&mut g, x)?;
            let (total, f, b) = detection_loss(&mut g, cls, reg, &targets, focal, cfg.loss.box_beta, cfg.loss.box_weight)?;
            let rec = StepRecord {
                step,
                epoch,
                loss: g.tape.value(total).data()[0].as_f64(),
                focal: g.tape.value(f).data()[0].as_f64(),
                box_loss: g.tape.value(b).data()[0].as_f64(),
                lr,
            };
            if !rec.loss.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    last_finite: step.checked_sub(1),
                });
            }
            g.tape.backward(total)?;
            model.store.absorb_grads(&g);
            if cfg.train.clip_norm > 0.0 {
                clip_grad_norm(&mut model.store, cfg.train.clip_norm);
            }
            opt.step(&mut model.store, lr);
            write_line(&mut metrics, metrics_path.as_deref().unwrap_or(Path::new("")), &rec)?;
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
        if let Some(dir) = out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                save_weights(&dir.join(format!("checkpoint_e{:03}.sacw", epoch + 1)), &model.store)?;
            }
        }
    }
    for p in model.store.iter_mut() {
        p.tensor.grad = None;
    }
    if let Some(dir) = out_dir {
        save_weights(&dir.join("final.sacw"), &model.store)?;
    }
    Ok(TrainOutcome { model, records })
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Runs the detector over `ds` in batches and scores it.
pub fn evaluate_detector<T: Real>(
    model: &Detector<T>,
    ds: &Dataset,
    opts: &PostprocessOptions,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut dets = Vec::with_capacity(ds.len());
    for batch in idx.chunks(batch_size.max(1)) {
        dets.extend(model.detect(&batch_images::<T>(ds, batch)?, opts)?);
    }
    let gts: Vec<_> = ds.records.iter().map(|r| r.objects.clone()).collect();
    Ok((evaluate_map(&dets, &gts, thresholds, model.config.num_classes), dets))
}
