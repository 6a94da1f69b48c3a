//! Second curriculum: minibatch training of the soft-bag network on frozen
//! instance representations, keeping the checkpoint with the best validation
//! Cox loss.

use std::collections::BTreeMap;

use dcmil_core::rng::stream;
use dcmil_core::{Bag, Matrix, Optimizer, ParamSet, RunConfig, SgdMomentum};
use dcmil_softbag::{
    batch_objective, cox_value, infer_bag, BagInference, BagRole, BatchBag, C2Model, IndicatorMode, LossWeights,
    ObjectiveOptions,
};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::folds::id_hash;

/// A bag reduced to its instance representations.
#[derive(Clone, Debug, PartialEq)]
pub struct C2Bag {
    pub id: String,
    pub g: Matrix,
    pub role: BagRole,
    pub time: f64,
    pub event: bool,
}

impl C2Bag {
    pub fn from_bag(bag: &Bag, g: Matrix) -> Self {
        let role = if !bag.is_tumor() {
            BagRole::Normal
        } else {
            match bag.risk_status().label() {
                Some(y) => BagRole::Labeled(y),
                None => BagRole::Unlabeled,
            }
        };
        Self {
            id: bag.patient_id().to_string(),
            g,
            role,
            time: bag.survival().time_months(),
            event: bag.survival().event(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct C2Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct C2Outcome {
    pub model: C2Model,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub history: Vec<C2Epoch>,
    pub train_hash: String,
}

/// Splits tumor bags into minibatches so every batch holds at least two bags
/// of each risk class whenever the class has two or more members.
///
/// `roles[i]` is the role of tumor bag `i`; returns indices into `roles`.
pub fn plan_batches(roles: &[BagRole], batch: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<usize>>> {
    if batch < 2 || roles.len() < 2 {
        return Err(TrainError::Invalid(format!(
            "a minibatch needs at least 2 tumor bags (batch size {batch}, {} bags)",
            roles.len()
        )));
    }
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (i, r) in roles.iter().enumerate() {
        match r {
            BagRole::Labeled(1) => groups[0].push(i),
            BagRole::Labeled(_) => groups[1].push(i),
            BagRole::Unlabeled => groups[2].push(i),
            BagRole::Normal => {
                return Err(TrainError::Invalid("normal bags are not batched with tumor bags".into()));
            }
        }
    }
    let mut n_batches = roles.len().div_ceil(batch);
    for g in &groups[..2] {
        if g.len() >= 2 {
            n_batches = n_batches.min(g.len() / 2);
        }
    }
    let n_batches = n_batches.max(1);
    let mut out = vec![Vec::new(); n_batches];
    let mut next = 0;
    for g in groups.iter_mut() {
        g.shuffle(rng);
        for &i in g.iter() {
            out[next % n_batches].push(i);
            next += 1;
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Per-feature standardization of instance representations, fitted on training instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Floor on a feature's spread so constant features map to zero.
const MIN_STD: f64 = 1e-8;

impl FeatureScaler {
    pub fn fit(bags: &[C2Bag]) -> Result<Self> {
        let width = bags.first().map(|b| b.g.cols()).ok_or_else(|| TrainError::Invalid("no bags to fit a scaler".into()))?;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0usize;
        for b in bags {
            if b.g.cols() != width {
                return Err(TrainError::Invalid(format!("bag {} has width {}, expected {width}", b.id, b.g.cols())));
            }
            for r in 0..b.g.rows() {
                for (c, &v) in b.g.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += b.g.rows();
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, g: &Matrix) -> Matrix {
        Matrix::from_fn(g.rows(), g.cols(), |r, c| (g.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn apply_all(&self, bags: &mut [C2Bag]) {
        for b in bags {
            b.g = self.apply(&b.g);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` (0 disables).
pub fn clip_gradients(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// Noise-free inference for every bag.
pub fn predict(model: &C2Model, bags: &[C2Bag]) -> Result<Vec<BagInference>> {
    bags.iter().map(|b| Ok(infer_bag(model, &b.g)?)).collect()
}

/// Cox loss per event over `bags`, or `None` without events.
fn validation_loss(model: &C2Model, bags: &[C2Bag]) -> Result<Option<f64>> {
    let events = bags.iter().filter(|b| b.event).count();
    if events == 0 {
        return Ok(None);
    }
    let inf = predict(model, bags)?;
    let risks: Vec<f64> = inf.iter().map(|i| i.risk).collect();
    let times: Vec<f64> = bags.iter().map(|b| b.time).collect();
    let ev: Vec<bool> = bags.iter().map(|b| b.event).collect();
    Ok(Some(cox_value(&risks, &times, &ev)? / events as f64))
}

/// Labeled bags whose class has a single member cannot be contrasted; they
/// fall back to the Cox term only.
fn contrastable(bags: &[C2Bag]) -> Vec<BagRole> {
    let count = |y: u8| bags.iter().filter(|b| b.role == BagRole::Labeled(y)).count();
    let (high, low) = (count(1), count(0));
    bags.iter()
        .map(|b| match b.role {
            BagRole::Labeled(1) if high < 2 => BagRole::Unlabeled,
            BagRole::Labeled(0) if low < 2 => BagRole::Unlabeled,
            r => r,
        })
        .collect()
}

pub fn train_curriculum2(train: &[C2Bag], val: &[C2Bag], normals: &[C2Bag], cfg: &RunConfig, seed: u64) -> Result<C2Outcome> {
    cfg.validate()?;
    if train.iter().any(|b| b.role == BagRole::Normal) || val.iter().any(|b| b.role == BagRole::Normal) {
        return Err(TrainError::Invalid("normal bags belong in the normal set".into()));
    }
    let roles = contrastable(train);
    if roles.iter().zip(train).any(|(r, b)| *r != b.role) {
        log::warn!("a risk class has a single training bag; it only enters the Cox term");
    }
    let train_hash = id_hash(train.iter().map(|b| b.id.as_str()));
    let mut model = C2Model::from_config(cfg, &mut stream(seed, "c2/init"))?;
    let weights = LossWeights::from_config(cfg);
    let mut opt = SgdMomentum::new(cfg.lr_c2, cfg.momentum_c2);
    let mut noise: ChaCha8Rng = stream(seed, "c2/gumbel");
    let per_batch_normals = normals.len().min((cfg.batch_c2 / 4).max(2));
    let mut normal_cursor = 0;
    let mut buffer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    let mut best_val = validation_loss(&model, val)?;
    let mut best = (None, model.clone());
    let mut stale = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs_c2 {
        let batches = plan_batches(&roles, cfg.batch_c2, &mut stream(seed, &format!("c2/batches/{epoch}")))?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let live: Vec<usize> = (0..per_batch_normals).map(|j| (normal_cursor + j) % normals.len()).collect();
            normal_cursor = (normal_cursor + per_batch_normals) % normals.len().max(1);
            let mut members: Vec<BatchBag> = batch
                .iter()
                .map(|&i| BatchBag {
                    g: &train[i].g,
                    role: roles[i],
                    time: train[i].time,
                    event: train[i].event,
                })
                .collect();
            members.extend(live.iter().map(|&j| BatchBag {
                g: &normals[j].g,
                role: BagRole::Normal,
                time: 0.0,
                event: false,
            }));
            let stored: Vec<Vec<f64>> = buffer
                .iter()
                .filter(|(j, _)| !live.contains(j))
                .map(|(_, v)| v.clone())
                .collect();
            let step = batch_objective(
                &model,
                &members,
                &stored,
                ObjectiveOptions {
                    weights,
                    mode: IndicatorMode::StraightThrough,
                    noise: Some(&mut noise),
                    with_grads: true,
                },
            )?;
            if !step.loss.is_finite() {
                return Err(TrainError::Invalid(format!("non-finite loss at epoch {epoch}")));
            }
            for (&j, rep) in live.iter().zip(step.normal_reps) {
                buffer.insert(j, rep);
            }
            let mut grads = step.grads.expect("requested");
            clip_gradients(&mut grads, cfg.grad_clip_c2);
            opt.step(&mut model.params, &grads);
            epoch_loss += step.loss;
            log::trace!(
                "c2 epoch {epoch} loss {:.6} (cox {:.4}, tcl {:.4}, adc {:.4}, sparsity {:.4}) [train {train_hash}]",
                step.loss,
                step.cox,
                step.tcl,
                step.adc,
                step.sparsity
            );
        }
        let val_loss = validation_loss(&model, val)?;
        history.push(C2Epoch {
            epoch,
            train_loss: epoch_loss,
            val_loss,
        });
        log::debug!("c2 epoch {epoch}: loss {epoch_loss:.6}, val {val_loss:?} [train {train_hash}]");
        match (val_loss, best_val) {
            (Some(v), Some(b)) if v < b => {
                best_val = Some(v);
                best = (Some(epoch), model.clone());
                stale = 0;
            }
            (Some(_), Some(_)) => {
                stale += 1;
                if stale >= cfg.patience_c2 {
                    log::info!("c2 early stop after epoch {epoch}");
                    break;
                }
            }
            _ => best = (Some(epoch), model.clone()),
        }
    }
    Ok(C2Outcome {
        model: best.1,
        best_epoch: best.0,
        best_val,
        history,
        train_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            token_dim: 6,
            n_heads: 2,
            bag_dim: 5,
            soft_bag_dim: 4,
            attention_dim: 3,
            selector_hidden: 4,
            aggregator_hidden: 3,
            soft_bag_size: 3,
            batch_c2: 6,
            epochs_c2: 3,
            ..RunConfig::desk()
        }
    }

    fn bags(n: usize, seed: u64) -> Vec<C2Bag> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let level = if i % 2 == 0 { 1.0 } else { -1.0 };
                C2Bag {
                    id: format!("T{i:04}"),
                    g: Matrix::from_fn(5, 6, |_, _| level + rng.random_range(-0.5..0.5)),
                    role: match i % 5 {
                        4 => BagRole::Unlabeled,
                        _ => BagRole::Labeled(u8::from(i % 2 == 0)),
                    },
                    time: if i % 2 == 0 { 10.0 + i as f64 } else { 60.0 + i as f64 },
                    event: i % 5 != 4,
                }
            })
            .collect()
    }

    fn normals(n: usize) -> Vec<C2Bag> {
        (0..n)
            .map(|i| C2Bag {
                id: format!("N{i:04}"),
                g: Matrix::filled(4, 6, 0.1 * i as f64),
                role: BagRole::Normal,
                time: 0.0,
                event: false,
            })
            .collect()
    }

    #[test]
    fn batches_hold_two_of_each_class() {
        let b = bags(30, 1);
        let roles: Vec<BagRole> = b.iter().map(|x| x.role).collect();
        let plan = plan_batches(&roles, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        for batch in &plan {
            for y in [0u8, 1] {
                assert!(batch.iter().filter(|&&i| roles[i] == BagRole::Labeled(y)).count() >= 2);
            }
        }
        assert!(plan_batches(&roles[..1], 6, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
        assert!(plan_batches(&roles, 1, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let cfg = RunConfig {
            epochs_c2: 0,
            ..tiny_cfg()
        };
        let out = train_curriculum2(&bags(10, 3), &bags(4, 4), &normals(2), &cfg, 7).unwrap();
        let init = C2Model::from_config(&cfg, &mut stream(7, "c2/init")).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn training_is_deterministic_and_improves_validation() {
        let cfg = RunConfig {
            epochs_c2: 15,
            ..tiny_cfg()
        };
        let (train, val) = (bags(20, 5), bags(10, 6));
        let a = train_curriculum2(&train, &val, &normals(3), &cfg, 9).unwrap();
        let b = train_curriculum2(&train, &val, &normals(3), &cfg, 9).unwrap();
        assert_eq!(a.model, b.model);
        let init = validation_loss(&C2Model::from_config(&cfg, &mut stream(9, "c2/init")).unwrap(), &val)
            .unwrap()
            .unwrap();
        assert!(a.best_val.unwrap() <= init);
        let inf = predict(&a.model, &val).unwrap();
        assert_eq!(inf.len(), 10);
    }

    #[test]
    fn scaler_standardizes_training_features() {
        let b = bags(6, 11);
        let s = FeatureScaler::fit(&b).unwrap();
        let mut scaled = b.clone();
        s.apply_all(&mut scaled);
        let rows: Vec<&[f64]> = scaled.iter().flat_map(|x| (0..x.g.rows()).map(move |r| x.g.row(r))).collect();
        for c in 0..6 {
            let m = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
            let v = rows.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        let constant = [C2Bag { g: Matrix::filled(3, 2, 4.0), ..b[0].clone() }];
        let s = FeatureScaler::fit(&constant).unwrap();
        assert_eq!(s.apply(&constant[0].g), Matrix::zeros(3, 2));
        assert!(FeatureScaler::fit(&[]).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut p = ParamSet::new();
        p.insert("a", Matrix::row_vector(&[3.0, 0.0]));
        p.insert("b", Matrix::row_vector(&[4.0]));
        let mut q = p.clone();
        assert_eq!(clip_gradients(&mut q, 10.0), 5.0);
        assert_eq!(q, p);
        clip_gradients(&mut q, 1.0);
        assert!((q.flatten().iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-15);
        let mut r = p.clone();
        clip_gradients(&mut r, 0.0);
        assert_eq!(r, p);
    }

    #[test]
    fn singleton_class_degrades_to_cox_only() {
        let mut train = bags(8, 8);
        for b in train.iter_mut().filter(|b| b.role == BagRole::Labeled(1)).skip(1) {
            b.role = BagRole::Unlabeled;
        }
        assert!(train_curriculum2(&train, &[], &[], &tiny_cfg(), 3).is_ok());
    }
}
