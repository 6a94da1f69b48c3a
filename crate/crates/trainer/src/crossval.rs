//! K-fold cross-validation of both curricula with held-out survival metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dcmil_core::rng::{derive_seed, stream};
use dcmil_core::{Bag, RunConfig};
use dcmil_encoder::C1Model;
use dcmil_softbag::{BagInference, C2Model};
use dcmil_survival::plot::km_svg;
use dcmil_survival::{concordance_index, km_estimate, logrank_test, median, SurvivalGroup};
use rand::seq::SliceRandom;

use crate::curriculum1::{encode_bag, train_curriculum1, C1Outcome};
use crate::curriculum2::{predict, train_curriculum2, C2Bag, C2Outcome, FeatureScaler};
use crate::error::{Result, TrainError};
use crate::folds::{id_hash, validation_split, FoldPlan};

/// Held-out prediction for one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRisk {
    pub patient_id: String,
    pub fold: usize,
    pub risk: f64,
    pub time: f64,
    pub event: bool,
    /// Above the fold's median risk.
    pub high: bool,
}

#[derive(Clone, Debug)]
pub struct FoldOutput {
    pub fold: usize,
    pub c_index: f64,
    pub logrank_p: f64,
    pub test: Vec<PatientRisk>,
    pub inferences: Vec<(String, BagInference)>,
    /// Digest of the patients whose data reached any parameter update.
    pub train_hash: String,
    pub test_hash: String,
    pub c1: C1Outcome,
    pub scaler: FeatureScaler,
    pub c2: C2Outcome,
}

#[derive(Clone, Debug)]
pub struct CrossvalReport {
    pub dataset: String,
    pub plan: FoldPlan,
    pub folds: Vec<FoldOutput>,
    pub mean_c_index: f64,
    pub std_c_index: f64,
    /// Logrank p-value of the pooled high/low groups, each split at its own fold's median.
    pub pooled_logrank_p: f64,
}

impl CrossvalReport {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(self)
    }
}

fn groups(patients: &[&PatientRisk]) -> (SurvivalGroup, SurvivalGroup) {
    let mut high = SurvivalGroup::default();
    let mut low = SurvivalGroup::default();
    for p in patients {
        let g = if p.high { &mut high } else { &mut low };
        g.times.push(p.time);
        g.events.push(p.event);
    }
    (high, low)
}

fn logrank_p(patients: &[&PatientRisk]) -> Result<f64> {
    let (high, low) = groups(patients);
    if high.is_empty() || low.is_empty() {
        log::warn!("median split left an empty group; logrank p set to 1");
        return Ok(1.0);
    }
    Ok(logrank_test(&high, &low)?.p_value)
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The bags of one fold, split into the sets each stage consumes.
#[derive(Clone, Debug)]
pub struct FoldSets<'a> {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<&'a Bag>,
    pub val: Vec<&'a Bag>,
    pub test: Vec<&'a Bag>,
    pub normals: Vec<&'a Bag>,
    pub train_hash: String,
    pub test_hash: String,
}

pub fn fold_sets<'a>(bags: &'a [Bag], plan: &FoldPlan, fold: usize, cfg: &RunConfig) -> Result<FoldSets<'a>> {
    if fold >= plan.k {
        return Err(TrainError::Invalid(format!("fold {fold} out of range for {} folds", plan.k)));
    }
    let seed = derive_seed(cfg.rng_seed, &format!("fold{fold}"));
    let in_fold = |b: &&Bag, test: bool| plan.fold_of(b.patient_id()).is_some_and(|f| (f == fold) == test);
    let test: Vec<&Bag> = bags.iter().filter(|b| in_fold(b, true)).collect();
    let train_all: Vec<&Bag> = bags.iter().filter(|b| in_fold(b, false)).collect();
    let normals: Vec<&Bag> = bags.iter().filter(|b| !b.is_tumor()).collect();
    if test.iter().any(|t| train_all.iter().any(|b| b.patient_id() == t.patient_id())) {
        return Err(TrainError::Invalid(format!("fold {fold}: a test patient is also in training")));
    }
    if !test.iter().any(|b| b.survival().event()) {
        return Err(TrainError::Invalid(format!("fold {fold} has no events")));
    }
    let (train, val) = validation_split(&train_all, cfg.val_fraction, seed, "validation");
    let train_hash = id_hash(train_all.iter().map(|b| b.patient_id()));
    let test_hash = id_hash(test.iter().map(|b| b.patient_id()));
    log::info!(
        "fold {fold}: {} train, {} validation, {} test [train {train_hash}, test {test_hash}]",
        train.len(),
        val.len(),
        test.len()
    );
    Ok(FoldSets {
        fold,
        seed,
        train,
        val,
        test,
        normals,
        train_hash,
        test_hash,
    })
}

/// Encoded, standardized sets of one fold.
#[derive(Clone, Debug)]
pub struct EncodedFold {
    pub train: Vec<C2Bag>,
    pub val: Vec<C2Bag>,
    pub test: Vec<C2Bag>,
    pub normals: Vec<C2Bag>,
    pub scaler: FeatureScaler,
}

/// Encodes every set with `model`; the scaler is fitted on the training set
/// unless one is given.
pub fn encode_fold(model: &C1Model, sets: &FoldSets, scaler: Option<&FeatureScaler>) -> Result<EncodedFold> {
    let encode = |set: &[&Bag]| -> Result<Vec<C2Bag>> {
        set.iter().map(|b| Ok(C2Bag::from_bag(b, encode_bag(model, b)?))).collect()
    };
    let (mut train, mut val, mut test, mut normals) =
        (encode(&sets.train)?, encode(&sets.val)?, encode(&sets.test)?, encode(&sets.normals)?);
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => FeatureScaler::fit(&train)?,
    };
    for set in [&mut train, &mut val, &mut test, &mut normals] {
        scaler.apply_all(set);
    }
    Ok(EncodedFold {
        train,
        val,
        test,
        normals,
        scaler,
    })
}

/// Held-out metrics of one fold.
#[derive(Clone, Debug)]
pub struct FoldEvaluation {
    pub c_index: f64,
    pub logrank_p: f64,
    pub test: Vec<PatientRisk>,
    pub inferences: Vec<(String, BagInference)>,
}

pub fn evaluate_fold(fold: usize, model: &C2Model, test: &[C2Bag]) -> Result<FoldEvaluation> {
    let inf = predict(model, test)?;
    let risks: Vec<f64> = inf.iter().map(|i| i.risk).collect();
    let times: Vec<f64> = test.iter().map(|b| b.time).collect();
    let events: Vec<bool> = test.iter().map(|b| b.event).collect();
    let c_index = concordance_index(&times, &events, &risks)?;
    let cut = median(&risks)?;
    let patients: Vec<PatientRisk> = test
        .iter()
        .zip(&risks)
        .map(|(b, &r)| PatientRisk {
            patient_id: b.id.clone(),
            fold,
            risk: r,
            time: b.time,
            event: b.event,
            high: r > cut,
        })
        .collect();
    let logrank_p = logrank_p(&patients.iter().collect::<Vec<_>>())?;
    log::info!("fold {fold}: C-index {c_index:.4}, logrank p {logrank_p:.3e}");
    Ok(FoldEvaluation {
        c_index,
        logrank_p,
        test: patients,
        inferences: test.iter().map(|b| b.id.clone()).zip(inf).collect(),
    })
}

impl FoldOutput {
    pub fn new(sets: &FoldSets, eval: FoldEvaluation, c1: C1Outcome, scaler: FeatureScaler, c2: C2Outcome) -> Self {
        Self {
            fold: sets.fold,
            c_index: eval.c_index,
            logrank_p: eval.logrank_p,
            test: eval.test,
            inferences: eval.inferences,
            train_hash: sets.train_hash.clone(),
            test_hash: sets.test_hash.clone(),
            c1,
            scaler,
            c2,
        }
    }
}

/// Trains and evaluates one fold of `plan`.
pub fn run_fold(bags: &[Bag], plan: &FoldPlan, fold: usize, cfg: &RunConfig) -> Result<FoldOutput> {
    let sets = fold_sets(bags, plan, fold, cfg)?;
    let c1 = train_curriculum1(&sets.train, &sets.val, cfg, sets.seed)?;
    let enc = encode_fold(&c1.model, &sets, None)?;
    let c2 = train_curriculum2(&enc.train, &enc.val, &enc.normals, cfg, sets.seed)?;
    let eval = evaluate_fold(fold, &c2.model, &enc.test)?;
    Ok(FoldOutput::new(&sets, eval, c1, enc.scaler, c2))
}

/// Aggregates per-fold outputs into the cross-validation summary.
pub fn aggregate(dataset: &str, plan: FoldPlan, folds: Vec<FoldOutput>) -> Result<CrossvalReport> {
    let cs: Vec<f64> = folds.iter().map(|f| f.c_index).collect();
    let (mean_c_index, std_c_index) = mean_std(&cs);
    let pooled: Vec<&PatientRisk> = folds.iter().flat_map(|f| &f.test).collect();
    let pooled_logrank_p = logrank_p(&pooled)?;
    Ok(CrossvalReport {
        dataset: dataset.to_string(),
        plan,
        folds,
        mean_c_index,
        std_c_index,
        pooled_logrank_p,
    })
}

/// Runs every fold and aggregates the held-out metrics.
pub fn crossval_run(bags: &[Bag], cfg: &RunConfig) -> Result<CrossvalReport> {
    cfg.validate()?;
    let plan = FoldPlan::new(bags, cfg.folds, cfg.rng_seed)?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(bags, &plan, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&cfg.dataset, plan, folds)
}

/// Tumor bags with their survival records permuted among each other.
pub fn shuffle_labels(bags: &[Bag], seed: u64) -> Vec<Bag> {
    let tumor: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].is_tumor()).collect();
    let mut records: Vec<_> = tumor.iter().map(|&i| bags[i].survival().clone()).collect();
    records.shuffle(&mut stream(seed, "shuffled-control"));
    let mut out = bags.to_vec();
    for (&i, r) in tumor.iter().zip(records) {
        out[i] = bags[i].with_survival(r);
    }
    out
}

fn metrics_csv(report: &CrossvalReport) -> String {
    let mut out = String::from("fold,dataset,c_index,logrank_p,n_patients\n");
    for f in &report.folds {
        let _ = writeln!(out, "{},{},{:.6},{:.6e},{}", f.fold, report.dataset, f.c_index, f.logrank_p, f.test.len());
    }
    let ps: Vec<f64> = report.folds.iter().map(|f| f.logrank_p).collect();
    let (mean_p, std_p) = mean_std(&ps);
    let n: usize = report.folds.iter().map(|f| f.test.len()).sum();
    let _ = writeln!(out, "mean,{},{:.6},{:.6e},{n}", report.dataset, report.mean_c_index, mean_p);
    let _ = writeln!(out, "std,{},{:.6},{:.6e},{n}", report.dataset, report.std_c_index, std_p);
    let _ = writeln!(out, "pooled,{},,{:.6e},{n}", report.dataset, report.pooled_logrank_p);
    out
}

fn km_plot(title: &str, patients: &[&PatientRisk]) -> Result<String> {
    let (high, low) = groups(patients);
    let x_max = patients.iter().map(|p| p.time).fold(1.0, f64::max);
    let mut curves = Vec::new();
    let high_km = (!high.is_empty()).then(|| km_estimate(&high.times, &high.events)).transpose()?;
    let low_km = (!low.is_empty()).then(|| km_estimate(&low.times, &low.events)).transpose()?;
    if let Some(k) = &high_km {
        curves.push(("high risk", k));
    }
    if let Some(k) = &low_km {
        curves.push(("low risk", k));
    }
    Ok(km_svg(title, &curves, x_max))
}

/// Writes the config snapshot, fold plan, checkpoints, metrics, plots and
/// exports of `report` under `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, report: &CrossvalReport, bags: &[Bag]) -> Result<()> {
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.cfg"))?;
    fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&report.plan)?)?;
    let hash = cfg.hash();
    for f in &report.folds {
        let fold_dir = dir.join(format!("fold{}", f.fold));
        fs::create_dir_all(&fold_dir)?;
        dcmil_encoder::save_checkpoint(&fold_dir.join("c1.json"), &f.c1.model, &hash)?;
        dcmil_softbag::save_checkpoint(&fold_dir.join("c2.json"), &f.c2.model, &hash)?;
        fs::write(fold_dir.join("scaler.json"), serde_json::to_string(&f.scaler)?)?;
    }
    write_evaluation(dir, report, bags)
}

/// Writes metrics.csv, Kaplan-Meier plots and the exports directory.
pub fn write_evaluation(dir: &Path, report: &CrossvalReport, bags: &[Bag]) -> Result<()> {
    fs::create_dir_all(dir.join("plots"))?;
    fs::create_dir_all(dir.join("exports/saliency"))?;
    fs::write(dir.join("metrics.csv"), report.metrics_csv())?;

    let mut risks = String::from("patient_id,fold,risk,time_months,event,group\n");
    let mut leakage = String::from("fold,train_hash,test_hash\n");
    for f in &report.folds {
        let refs: Vec<&PatientRisk> = f.test.iter().collect();
        fs::write(
            dir.join(format!("plots/km_fold{}.svg", f.fold)),
            km_plot(&format!("Fold {} held-out Kaplan-Meier", f.fold), &refs)?,
        )?;
        for p in &f.test {
            let _ = writeln!(
                risks,
                "{},{},{:.9},{},{},{}",
                p.patient_id,
                p.fold,
                p.risk,
                p.time,
                u8::from(p.event),
                if p.high { "high" } else { "low" }
            );
        }
        let _ = writeln!(leakage, "{},{},{}", f.fold, f.train_hash, f.test_hash);
        let ind: Vec<(&str, &BagInference)> = f.inferences.iter().map(|(id, i)| (id.as_str(), i)).collect();
        dcmil_softbag::write_indicator_csv(&dir.join(format!("exports/indicators_fold{}.csv", f.fold)), &ind)?;
        let mut emb = String::from("patient_id");
        let width = f.inferences.first().map_or(0, |(_, i)| i.b.len());
        for k in 0..width {
            let _ = write!(emb, ",b{k}");
        }
        emb.push('\n');
        for (id, i) in &f.inferences {
            emb.push_str(id);
            for v in &i.b {
                let _ = write!(emb, ",{v:.9}");
            }
            emb.push('\n');
        }
        fs::write(dir.join(format!("exports/embeddings_fold{}.csv", f.fold)), emb)?;
        for p in &f.test {
            let Some(bag) = bags.iter().find(|b| b.patient_id() == p.patient_id) else {
                continue;
            };
            let pyramid = &bag.instances()[0];
            let rep = f.c1.model.encode(pyramid)?;
            if let Some(mask) = rep.masks.last() {
                let fine = pyramid.tile(pyramid.levels() - 1);
                let shown = dcmil_encoder::overlay(fine, mask)?;
                dcmil_dataio::write_png(&dir.join(format!("exports/saliency/{}_0.png", p.patient_id)), &shown)?;
            }
        }
    }
    let pooled: Vec<&PatientRisk> = report.folds.iter().flat_map(|f| &f.test).collect();
    fs::write(dir.join("plots/km_pooled.svg"), km_plot("Pooled held-out Kaplan-Meier", &pooled)?)?;
    fs::write(dir.join("exports/risks.csv"), risks)?;
    fs::write(dir.join("exports/leakage.csv"), leakage)?;
    Ok(())
}
