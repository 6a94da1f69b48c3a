//! First curriculum: pre-train the coarsest branch, copy it into the finer
//! branches, then train all branches jointly with self-paced instance pacing
//! and early stopping on validation loss.

use dcmil_core::rng::stream;
use dcmil_core::{Adam, Bag, Matrix, Optimizer, RunConfig, TilePyramid};
use dcmil_encoder::{self_paced_select, C1Model, Dropout, LabeledInstance, PaceSchedule, StepOutput};
use rand::seq::SliceRandom;

use crate::error::{Result, TrainError};
use crate::folds::id_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C1Phase {
    Pretrain,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct C1Epoch {
    pub phase: C1Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Instances admitted by the pace this epoch.
    pub admitted: usize,
}

#[derive(Clone, Debug)]
pub struct C1Outcome {
    pub model: C1Model,
    pub history: Vec<C1Epoch>,
    pub best_val: Option<f64>,
    /// Digest of the patient ids that produced any parameter update.
    pub train_hash: String,
}

struct Item<'a> {
    bag: usize,
    pyramid: &'a TilePyramid,
    label: u8,
}

fn labeled_items<'a>(bags: &[&'a Bag]) -> Vec<Item<'a>> {
    let mut out = Vec::new();
    for (b, bag) in bags.iter().enumerate() {
        if !bag.is_tumor() {
            continue;
        }
        if let Some(label) = bag.risk_status().label() {
            out.extend(bag.instances().iter().map(|pyramid| Item { bag: b, pyramid, label }));
        }
    }
    out
}

/// Mean per-instance loss over `items` with every listed branch active.
fn mean_loss(model: &C1Model, items: &[Item], active: usize) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for it in items {
        total += model.instance_loss(it.pyramid, it.label, active)?;
    }
    Ok(Some(total / items.len() as f64))
}

fn add_grads(acc: &mut StepOutput, other: &StepOutput) {
    for (a, b) in acc.grads.iter_mut().zip(&other.grads) {
        a.add_assign(b);
    }
    acc.loss += other.loss;
}

struct Trainer<'c> {
    cfg: &'c RunConfig,
    optimizers: Vec<Adam>,
    seed: u64,
    steps: usize,
}

impl Trainer<'_> {
    fn reset(&mut self, branches: usize) {
        self.optimizers = (0..branches).map(|_| Adam::new(self.cfg.lr_c1)).collect();
    }

    /// One pass over `order` in minibatches; returns the summed minibatch loss.
    fn epoch(&mut self, model: &mut C1Model, items: &[Item], order: &[usize], active: usize, dropout_rng: &mut rand_chacha::ChaCha8Rng, bag_sizes: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_c1.max(1)) {
            let mut bags_in_batch: Vec<usize> = chunk.iter().map(|&i| items[i].bag).collect();
            bags_in_batch.sort_unstable();
            bags_in_batch.dedup();
            let n_bags = bags_in_batch.len() as f64;
            let batch: Vec<LabeledInstance> = chunk
                .iter()
                .map(|&i| LabeledInstance {
                    pyramid: items[i].pyramid,
                    label: items[i].label,
                    weight: 1.0 / (n_bags * bag_sizes[items[i].bag] as f64 * active as f64),
                })
                .collect();
            let mut dropout = Dropout::new(self.cfg.dropout, dropout_rng);
            let mut out = model.instances_objective(&batch, active, self.cfg.ranking_margin, self.cfg.beta_r, &mut dropout)?;
            if active > 1 {
                let s = model.structural_objective(active, self.cfg.beta_omega)?;
                add_grads(&mut out, &s);
            }
            for b in 0..active {
                self.optimizers[b].step(&mut model.branches[b], &out.grads[b]);
            }
            self.steps += 1;
            log::trace!("c1 step {} (seed {}) loss {:.6}", self.steps, self.seed, out.loss);
            total += out.loss;
        }
        Ok(total)
    }
}

/// Trains the instance encoder on the labeled tumor bags of `train`; `val`
/// drives early stopping in the joint phase.
pub fn train_curriculum1(train: &[&Bag], val: &[&Bag], cfg: &RunConfig, seed: u64) -> Result<C1Outcome> {
    cfg.validate()?;
    let items = labeled_items(train);
    let highs = items.iter().filter(|i| i.label == 1).count();
    if highs == 0 || highs == items.len() {
        return Err(TrainError::Invalid(
            "training data needs both HIGH and LOW risk instances".into(),
        ));
    }
    let val_items = labeled_items(val);
    let bag_sizes: Vec<usize> = train.iter().map(|b| b.len()).collect();
    let train_hash = id_hash(train.iter().filter(|b| b.risk_status().label().is_some()).map(|b| b.patient_id()));
    log::info!("curriculum I: {} instances from training set {train_hash}", items.len());

    let mut model = C1Model::from_config(cfg, &mut stream(seed, "c1/init"))?;
    let s = model.n_branches();
    let mut dropout_rng = stream(seed, "c1/dropout");
    let mut trainer = Trainer {
        cfg,
        optimizers: Vec::new(),
        seed,
        steps: 0,
    };
    let mut history = Vec::new();

    trainer.reset(s);
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut stream(seed, &format!("c1/pretrain/{epoch}")));
        let loss = trainer.epoch(&mut model, &items, &order, 1, &mut dropout_rng, &bag_sizes)?;
        history.push(C1Epoch {
            phase: C1Phase::Pretrain,
            epoch,
            train_loss: loss,
            val_loss: None,
            admitted: items.len(),
        });
        log::debug!("c1 pretrain epoch {epoch}: loss {loss:.6} [train {train_hash}]");
    }
    if cfg.pretrain_epochs == 0 && cfg.joint_epochs == 0 {
        return Ok(C1Outcome {
            model,
            history,
            best_val: None,
            train_hash,
        });
    }
    model.share_first_branch();

    trainer.reset(s);
    let mut best = (mean_loss(&model, &val_items, s)?, model.clone());
    let mut stale = 0;
    let mut pace: Option<PaceSchedule> = None;
    for epoch in 0..cfg.joint_epochs {
        let admitted: Vec<usize> = if cfg.self_paced {
            let losses = items
                .iter()
                .map(|it| model.instance_loss(it.pyramid, it.label, s))
                .collect::<std::result::Result<Vec<f64>, _>>()?;
            let schedule = *pace.get_or_insert_with(|| PaceSchedule::from_losses(&losses, cfg.self_paced_quantile, cfg.joint_epochs));
            self_paced_select(&losses, schedule.lambda(epoch))
        } else {
            (0..items.len()).collect()
        };
        let mut order = admitted.clone();
        order.shuffle(&mut stream(seed, &format!("c1/joint/{epoch}")));
        let loss = trainer.epoch(&mut model, &items, &order, s, &mut dropout_rng, &bag_sizes)?;
        let val_loss = mean_loss(&model, &val_items, s)?;
        history.push(C1Epoch {
            phase: C1Phase::Joint,
            epoch,
            train_loss: loss,
            val_loss,
            admitted: admitted.len(),
        });
        log::debug!(
            "c1 joint epoch {epoch}: loss {loss:.6}, val {val_loss:?}, admitted {} [train {train_hash}]",
            admitted.len()
        );
        match (val_loss, best.0) {
            (Some(v), Some(b)) if v < b => {
                best = (Some(v), model.clone());
                stale = 0;
            }
            (Some(_), Some(_)) => {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("c1 early stop after joint epoch {epoch}");
                    break;
                }
            }
            _ => best = (None, model.clone()),
        }
    }
    Ok(C1Outcome {
        model: best.1,
        history,
        best_val: best.0,
        train_hash,
    })
}

/// Finest-branch representation of every instance of `bag`, one row each.
pub fn encode_bag(model: &C1Model, bag: &Bag) -> Result<Matrix> {
    let rows = bag
        .instances()
        .iter()
        .map(|p| model.encode(p).map(|r| r.g_final().to_vec()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Matrix::from_rows(&rows))
}
