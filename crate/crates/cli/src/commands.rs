//! Training, evaluation and analysis commands over a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dcmil_core::rng::derive_seed;
use dcmil_core::{Bag, RunConfig};
use dcmil_dataio::{generate_cohort, ingest_tiles, write_cohort, MANIFEST_FILE};
use dcmil_encoder::C1Model;
use dcmil_softbag::C2Model;
use dcmil_survival::plot::{heatmap_svg, histogram_svg};
use dcmil_survival::{distance_heatmap, histogram, HISTOGRAM_BIN_WIDTH};
use dcmil_trainer::{
    aggregate, encode_bag, encode_fold, evaluate_fold, fold_sets, train_curriculum1, train_curriculum2, uncertainty_run,
    write_evaluation, C1Outcome, C2Outcome, FeatureScaler, FoldOutput, FoldPlan, Result, TrainError,
};

use crate::Context;

pub fn generate_data(ctx: &Context) -> Result<()> {
    let cohort = generate_cohort(&ctx.spec)?;
    fs::create_dir_all(&ctx.out)?;
    write_cohort(&ctx.out, &cohort)?;
    // Run and synthetic keys together, so the file can seed later commands.
    fs::write(ctx.out.join("config.cfg"), format!("{}{}", ctx.cfg.to_kv_string(), ctx.spec.to_kv_string()))?;
    log::info!("wrote {} bags to {}", cohort.bags.len(), ctx.out.display());
    Ok(())
}

pub fn load_bags(ctx: &Context) -> Result<Vec<Bag>> {
    let dir = ctx.data_dir()?;
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(TrainError::Missing(format!("cohort manifest {}", manifest.display())));
    }
    Ok(ingest_tiles(dir, &manifest, ctx.cfg.risk_threshold_months)?)
}

fn fold_dir(ctx: &Context, fold: usize) -> PathBuf {
    ctx.out.join(format!("fold{fold}"))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(TrainError::Missing(format!("{what} ({}); run the earlier stages first", path.display())))
    }
}

/// Saves the config snapshot, refusing to mix configs inside one run directory.
fn pin_config(ctx: &Context) -> Result<()> {
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("config.cfg");
    if path.is_file() {
        let text = fs::read_to_string(&path)?;
        let (existing, _) = crate::load_config(Some(&text), None)?;
        if existing != ctx.cfg {
            return Err(TrainError::Invalid(format!(
                "{} was written with a different config; use a fresh output directory",
                ctx.out.display()
            )));
        }
    }
    ctx.cfg.save(&path)?;
    Ok(())
}

fn plan(ctx: &Context, bags: &[Bag]) -> Result<FoldPlan> {
    ctx.cfg.validate()?;
    let plan = FoldPlan::new(bags, ctx.cfg.folds, ctx.cfg.rng_seed)?;
    fs::write(ctx.out.join("folds.json"), serde_json::to_string_pretty(&plan)?)?;
    Ok(plan)
}

fn load_c1(ctx: &Context, fold: usize) -> Result<C1Model> {
    let path = fold_dir(ctx, fold).join("c1.json");
    require(&path, &format!("fold {fold} encoder checkpoint"))?;
    Ok(dcmil_encoder::load_checkpoint(&path, Some(&ctx.cfg.hash()))?)
}

fn load_c2(ctx: &Context, fold: usize) -> Result<(C2Model, FeatureScaler)> {
    let dir = fold_dir(ctx, fold);
    let (c2, scaler) = (dir.join("c2.json"), dir.join("scaler.json"));
    require(&c2, &format!("fold {fold} soft-bag checkpoint"))?;
    require(&scaler, &format!("fold {fold} feature scaler"))?;
    let model = dcmil_softbag::load_checkpoint(&c2, Some(&ctx.cfg.hash()))?;
    Ok((model, serde_json::from_slice(&fs::read(scaler)?)?))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn train_c1(ctx: &Context) -> Result<()> {
    let bags = load_bags(ctx)?;
    pin_config(ctx)?;
    let plan = plan(ctx, &bags)?;
    let hash = ctx.cfg.hash();
    for fold in ctx.folds()? {
        let sets = fold_sets(&bags, &plan, fold, &ctx.cfg)?;
        let c1 = train_curriculum1(&sets.train, &sets.val, &ctx.cfg, sets.seed)?;
        let dir = fold_dir(ctx, fold);
        fs::create_dir_all(&dir)?;
        dcmil_encoder::save_checkpoint(&dir.join("c1.json"), &c1.model, &hash)?;
        let mut hist = String::from("phase,epoch,train_loss,val_loss,admitted\n");
        for h in &c1.history {
            let _ = writeln!(hist, "{:?},{},{:.6},{},{}", h.phase, h.epoch, h.train_loss, opt(h.val_loss), h.admitted);
        }
        fs::write(dir.join("c1_history.csv"), hist)?;
    }
    Ok(())
}

pub fn train_c2(ctx: &Context) -> Result<()> {
    let bags = load_bags(ctx)?;
    pin_config(ctx)?;
    let plan = plan(ctx, &bags)?;
    let hash = ctx.cfg.hash();
    for fold in ctx.folds()? {
        let c1 = load_c1(ctx, fold)?;
        let sets = fold_sets(&bags, &plan, fold, &ctx.cfg)?;
        let enc = encode_fold(&c1, &sets, None)?;
        let c2 = train_curriculum2(&enc.train, &enc.val, &enc.normals, &ctx.cfg, sets.seed)?;
        let dir = fold_dir(ctx, fold);
        dcmil_softbag::save_checkpoint(&dir.join("c2.json"), &c2.model, &hash)?;
        fs::write(dir.join("scaler.json"), serde_json::to_string(&enc.scaler)?)?;
        let mut hist = String::from("epoch,train_loss,val_loss\n");
        for h in &c2.history {
            let _ = writeln!(hist, "{},{:.6},{}", h.epoch, h.train_loss, opt(h.val_loss));
        }
        fs::write(dir.join("c2_history.csv"), hist)?;
    }
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let folds = ctx.folds()?;
    // Checkpoints are checked before touching the cohort.
    for &fold in &folds {
        require(&fold_dir(ctx, fold).join("c1.json"), &format!("fold {fold} encoder checkpoint"))?;
        require(&fold_dir(ctx, fold).join("c2.json"), &format!("fold {fold} soft-bag checkpoint"))?;
    }
    let bags = load_bags(ctx)?;
    let plan = plan(ctx, &bags)?;
    let mut outputs = Vec::new();
    for fold in folds {
        let c1 = load_c1(ctx, fold)?;
        let (c2, scaler) = load_c2(ctx, fold)?;
        let sets = fold_sets(&bags, &plan, fold, &ctx.cfg)?;
        let enc = encode_fold(&c1, &sets, Some(&scaler))?;
        let eval = evaluate_fold(fold, &c2, &enc.test)?;
        let c1 = C1Outcome {
            model: c1,
            history: Vec::new(),
            best_val: None,
            train_hash: sets.train_hash.clone(),
        };
        let c2 = C2Outcome {
            model: c2,
            best_epoch: None,
            best_val: None,
            history: Vec::new(),
            train_hash: sets.train_hash.clone(),
        };
        outputs.push(FoldOutput::new(&sets, eval, c1, scaler, c2));
    }
    let report = aggregate(&ctx.cfg.dataset, plan, outputs)?;
    write_evaluation(&ctx.out, &report, &bags)?;
    log::info!(
        "C-index {:.4} +/- {:.4}, pooled logrank p {:.3e}",
        report.mean_c_index,
        report.std_c_index,
        report.pooled_logrank_p
    );
    Ok(())
}

fn uncertainty_seed(cfg: &RunConfig, fold: usize) -> u64 {
    derive_seed(cfg.rng_seed, &format!("uncertainty/fold{fold}"))
}

pub fn uncertainty(ctx: &Context) -> Result<()> {
    let bags = load_bags(ctx)?;
    let plan = plan(ctx, &bags)?;
    fs::create_dir_all(ctx.out.join("exports"))?;
    fs::create_dir_all(ctx.out.join("plots"))?;
    let mut summary = String::from("fold,n_instances,accuracy,threshold,youden_j,n_confident,confident_accuracy\n");
    for fold in ctx.folds()? {
        let c1 = load_c1(ctx, fold)?;
        let sets = fold_sets(&bags, &plan, fold, &ctx.cfg)?;
        let u = uncertainty_run(&c1, &sets.test, ctx.cfg.mc_passes, ctx.cfg.mc_dropout, uncertainty_seed(&ctx.cfg, fold))?;
        let r = &u.report;
        let mut rows = String::from("patient_id,instance,label,mean_prob,std,correct,confident\n");
        for (k, (id, i)) in u.instances.iter().enumerate() {
            let _ = writeln!(
                rows,
                "{id},{i},{},{:.6},{:.6e},{},{}",
                u.labels[k],
                r.mean_prob[k],
                r.per_instance_std[k],
                u8::from(u.correct[k]),
                r.confident_mask.get(k).map_or(String::new(), |&c| u8::from(c).to_string())
            );
        }
        fs::write(ctx.out.join(format!("exports/uncertainty_fold{fold}.csv")), rows)?;

        let n = u.correct.len();
        let acc = u.correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;
        let confident: Vec<bool> = u
            .correct
            .iter()
            .zip(&r.confident_mask)
            .filter(|(_, &m)| m)
            .map(|(&c, _)| c)
            .collect();
        let conf_acc = confident.iter().filter(|&&c| c).count() as f64 / confident.len().max(1) as f64;
        let _ = writeln!(
            summary,
            "{fold},{n},{acc:.6},{},{},{},{conf_acc:.6}",
            opt(r.threshold),
            opt(r.youden_j),
            confident.len()
        );
        let max = r.per_instance_std.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / 20.0 } else { 1e-3 };
        fs::write(
            ctx.out.join(format!("plots/uncertainty_fold{fold}.svg")),
            histogram_svg(
                &format!("Fold {fold} MC-dropout std"),
                "std of high-risk probability",
                &histogram(&r.per_instance_std, width),
                width,
                r.threshold,
            ),
        )?;
    }
    fs::write(ctx.out.join("exports/uncertainty_summary.csv"), summary)?;
    Ok(())
}

pub fn compare_normal(ctx: &Context) -> Result<()> {
    let bags = load_bags(ctx)?;
    let plan = plan(ctx, &bags)?;
    fs::create_dir_all(ctx.out.join("exports"))?;
    fs::create_dir_all(ctx.out.join("plots"))?;
    for fold in ctx.folds()? {
        let c1 = load_c1(ctx, fold)?;
        let sets = fold_sets(&bags, &plan, fold, &ctx.cfg)?;
        let rows = |b: &Bag| -> Result<Vec<Vec<f64>>> {
            let g = encode_bag(&c1, b)?;
            Ok((0..g.rows()).map(|r| g.row(r).to_vec()).collect())
        };
        let mut reference = Vec::new();
        for b in &sets.normals {
            reference.extend(rows(b)?);
        }
        if reference.is_empty() {
            return Err(TrainError::Invalid("the cohort has no normal bags to compare against".into()));
        }
        let mut csv = String::from("patient_id,risk_status,instance,distance\n");
        let mut grid = Vec::new();
        let mut by_status: [Vec<f64>; 3] = Default::default();
        for b in &sets.test {
            let map = distance_heatmap(&reference, &rows(b)?)?;
            let status = b.risk_status();
            for (i, d) in map.distances.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{i},{d:.6}", b.patient_id(), status.as_str());
            }
            let slot = match status.label() {
                Some(1) => 0,
                Some(_) => 1,
                None => 2,
            };
            by_status[slot].extend(&map.distances);
            grid.push(map.distances);
        }
        fs::write(ctx.out.join(format!("exports/distances_fold{fold}.csv")), csv)?;
        fs::write(
            ctx.out.join(format!("plots/distance_heatmap_fold{fold}.svg")),
            heatmap_svg(&format!("Fold {fold} distance to normal centroid (rows: patients)"), &grid),
        )?;
        for (slot, name) in ["high", "low"].iter().enumerate() {
            let d = &by_status[slot];
            if d.is_empty() {
                continue;
            }
            fs::write(
                ctx.out.join(format!("plots/distance_hist_{name}_fold{fold}.svg")),
                histogram_svg(
                    &format!("Fold {fold} {name}-risk instances"),
                    "distance to normal centroid",
                    &histogram(d, HISTOGRAM_BIN_WIDTH),
                    HISTOGRAM_BIN_WIDTH,
                    None,
                ),
            )?;
        }
    }
    Ok(())
}
