//! Synthetic cohorts whose prognosis is planted in the lesion area of each tile.
//!
//! Every tumor patient gets a lesion fraction `f`. Each of their instances
//! shows a lesion rectangle covering roughly `f` of the tile, and the latent
//! survival time is exponential with rate `baseline_hazard * hazard_multiplier^f`.

use dcmil_core::kv::{KvFile, KvWriter};
use dcmil_core::rng::stream;
use dcmil_core::{Bag, Source, SurvivalRecord, Tile, TilePyramid, TOKEN_SIDE};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{DataError, Result};

/// Procedural texture of one tissue class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    pub mean: f64,
    /// Diagonal stripe cycles across the finest tile.
    pub stripe_cycles: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub n_normals: usize,
    /// Inclusive range of instances per bag.
    pub instances_per_bag: (usize, usize),
    /// Union of intervals; a patient picks one interval uniformly, then `f` uniformly inside it.
    pub lesion_fraction_range: Vec<(f64, f64)>,
    /// Per-instance coverage is `f` plus uniform noise of this half-width.
    pub coverage_jitter: f64,
    pub baseline_hazard: f64,
    pub hazard_multiplier: f64,
    pub censoring_rate: f64,
    pub benign: TextureParams,
    pub lesion: TextureParams,
    pub stripe_amplitude: f64,
    pub noise_std: f64,
    pub tile_side_fine: usize,
    pub levels: usize,
    pub threshold_months: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let hazard_multiplier: f64 = 1e9;
        // Median survival of 36 months at f = 0.45, between the two modes.
        let baseline_hazard = std::f64::consts::LN_2 / 36.0 / hazard_multiplier.powf(0.45);
        Self {
            n_patients: 60,
            n_normals: 8,
            instances_per_bag: (8, 12),
            lesion_fraction_range: vec![(0.0, 0.4), (0.5, 0.9)],
            coverage_jitter: 0.05,
            baseline_hazard,
            hazard_multiplier,
            censoring_rate: 0.2,
            benign: TextureParams {
                mean: 0.35,
                stripe_cycles: 4.0,
            },
            lesion: TextureParams {
                mean: 0.7,
                stripe_cycles: 16.0,
            },
            stripe_amplitude: 0.08,
            noise_std: 0.05,
            tile_side_fine: 128,
            levels: 3,
            threshold_months: 36.0,
            rng_seed: 20240601,
        }
    }
}

fn format_ranges(r: &[(f64, f64)]) -> String {
    r.iter()
        .map(|(a, b)| format!("{a}:{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_ranges(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|part| {
            let (a, b) = part.split_once(':').unwrap_or((part, part));
            let a: f64 = a.trim().parse().map_err(|_| bad_range(s))?;
            let b: f64 = b.trim().parse().map_err(|_| bad_range(s))?;
            Ok((a, b))
        })
        .collect()
}

fn bad_range(s: &str) -> DataError {
    DataError::Input(format!(
        "cannot parse lesion fraction range `{s}` (expected `lo:hi,lo:hi`)"
    ))
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DataError::Input(m.to_string()));
        if self.n_patients == 0 {
            return err("n_patients must be positive");
        }
        let (lo, hi) = self.instances_per_bag;
        if lo == 0 || lo > hi {
            return err("instances_per_bag must be a nonempty range of positive counts");
        }
        if self.lesion_fraction_range.is_empty() {
            return err("lesion_fraction_range is empty");
        }
        for &(a, b) in &self.lesion_fraction_range {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return err("lesion fraction intervals must satisfy 0 <= lo <= hi <= 1");
            }
        }
        if !(self.baseline_hazard > 0.0) || !(self.hazard_multiplier > 0.0) {
            return err("hazards must be positive");
        }
        if !(0.0..=1.0).contains(&self.censoring_rate) {
            return err("censoring_rate must lie in [0, 1]");
        }
        if self.levels == 0 {
            return err("levels must be positive");
        }
        let coarse = self.tile_side_fine >> (self.levels - 1);
        if coarse == 0 || coarse % TOKEN_SIDE != 0 || coarse << (self.levels - 1) != self.tile_side_fine {
            return err("tile_side_fine must halve into multiples of 16 at every level");
        }
        if !(self.threshold_months > 0.0) {
            return err("threshold_months must be positive");
        }
        Ok(())
    }

    /// Reads `synthetic.*` keys, keeping current values for absent keys.
    pub fn take_from(mut self, kv: &mut KvFile) -> Result<Self> {
        self.n_patients = kv.take("synthetic.n_patients", self.n_patients)?;
        self.n_normals = kv.take("synthetic.n_normals", self.n_normals)?;
        self.instances_per_bag.0 = kv.take("synthetic.instances_min", self.instances_per_bag.0)?;
        self.instances_per_bag.1 = kv.take("synthetic.instances_max", self.instances_per_bag.1)?;
        if let Some(raw) = kv.take_raw("synthetic.lesion_fraction_range") {
            self.lesion_fraction_range = parse_ranges(&raw)?;
        }
        self.coverage_jitter = kv.take("synthetic.coverage_jitter", self.coverage_jitter)?;
        self.baseline_hazard = kv.take("synthetic.baseline_hazard", self.baseline_hazard)?;
        self.hazard_multiplier = kv.take("synthetic.hazard_multiplier", self.hazard_multiplier)?;
        self.censoring_rate = kv.take("synthetic.censoring_rate", self.censoring_rate)?;
        self.benign.mean = kv.take("synthetic.benign_mean", self.benign.mean)?;
        self.benign.stripe_cycles = kv.take("synthetic.benign_stripes", self.benign.stripe_cycles)?;
        self.lesion.mean = kv.take("synthetic.lesion_mean", self.lesion.mean)?;
        self.lesion.stripe_cycles = kv.take("synthetic.lesion_stripes", self.lesion.stripe_cycles)?;
        self.stripe_amplitude = kv.take("synthetic.stripe_amplitude", self.stripe_amplitude)?;
        self.noise_std = kv.take("synthetic.noise_std", self.noise_std)?;
        self.validate()?;
        Ok(self)
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        w.put("synthetic.n_patients", self.n_patients)
            .put("synthetic.n_normals", self.n_normals)
            .put("synthetic.instances_min", self.instances_per_bag.0)
            .put("synthetic.instances_max", self.instances_per_bag.1)
            .put("synthetic.lesion_fraction_range", format_ranges(&self.lesion_fraction_range))
            .put("synthetic.coverage_jitter", self.coverage_jitter)
            .put("synthetic.baseline_hazard", self.baseline_hazard)
            .put("synthetic.hazard_multiplier", self.hazard_multiplier)
            .put("synthetic.censoring_rate", self.censoring_rate)
            .put("synthetic.benign_mean", self.benign.mean)
            .put("synthetic.benign_stripes", self.benign.stripe_cycles)
            .put("synthetic.lesion_mean", self.lesion.mean)
            .put("synthetic.lesion_stripes", self.lesion.stripe_cycles)
            .put("synthetic.stripe_amplitude", self.stripe_amplitude)
            .put("synthetic.noise_std", self.noise_std);
        w.finish()
    }
}

/// The generator's log for one patient, including quantities a real cohort never reveals.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRow {
    pub patient_id: String,
    pub source: Source,
    pub lesion_fraction: f64,
    pub latent_time: Option<f64>,
    pub censor_time: Option<f64>,
    pub time_months: f64,
    pub event: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub bags: Vec<Bag>,
    pub truth: Vec<GroundTruthRow>,
}

pub fn tumor_id(k: usize) -> String {
    format!("T{k:04}")
}

pub fn normal_id(k: usize) -> String {
    format!("N{k:04}")
}

/// Draws the lesion fraction and survival outcome of one tumor patient.
pub fn draw_outcome(spec: &SyntheticSpec, patient_id: &str) -> Result<GroundTruthRow> {
    let mut rng = stream(spec.rng_seed, &format!("{patient_id}/outcome"));
    let (lo, hi) = spec.lesion_fraction_range[rng.random_range(0..spec.lesion_fraction_range.len())];
    let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let rate = spec.baseline_hazard * spec.hazard_multiplier.powf(f);
    let exp = Exp::new(rate).map_err(|e| DataError::Input(format!("hazard {rate}: {e}")))?;
    let latent = exp.sample(&mut rng);
    let censored = rng.random_bool(spec.censoring_rate);
    let censor_time = censored.then(|| rng.random_range(0.0..=1.0) * latent);
    Ok(GroundTruthRow {
        patient_id: patient_id.to_string(),
        source: Source::Tumor,
        lesion_fraction: f,
        latent_time: Some(latent),
        censor_time,
        time_months: censor_time.unwrap_or(latent),
        event: !censored,
    })
}

/// Tumor outcomes only, skipping tile rendering.
pub fn draw_outcomes(spec: &SyntheticSpec) -> Result<Vec<GroundTruthRow>> {
    spec.validate()?;
    (0..spec.n_patients).map(|k| draw_outcome(spec, &tumor_id(k))).collect()
}

fn render_fine_tile<R: Rng>(spec: &SyntheticSpec, coverage: f64, rng: &mut R) -> Vec<f32> {
    let s = spec.tile_side_fine;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise scale");
    // Lesion rectangle of area close to `coverage * s^2` at a random position.
    let (h, w) = if coverage <= 0.0 {
        (0, 0)
    } else {
        let w = ((s as f64) * coverage.sqrt()).round().clamp(1.0, s as f64) as usize;
        let h = ((coverage * (s * s) as f64) / w as f64).round().clamp(0.0, s as f64) as usize;
        (h, w)
    };
    let top = if h < s { rng.random_range(0..=s - h) } else { 0 };
    let left = if w < s { rng.random_range(0..=s - w) } else { 0 };
    let mut px = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let inside = r >= top && r < top + h && c >= left && c < left + w;
            let tex = if inside { spec.lesion } else { spec.benign };
            let phase = std::f64::consts::TAU * tex.stripe_cycles * (r + c) as f64 / (2 * s) as f64;
            let v = tex.mean + spec.stripe_amplitude * phase.sin() + noise.sample(rng);
            px.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    px
}

/// Halves a square image by averaging 2x2 blocks.
pub fn downsample(pixels: &[f32], side: usize) -> Vec<f32> {
    let half = side / 2;
    let mut out = Vec::with_capacity(half * half);
    for r in 0..half {
        for c in 0..half {
            let at = |rr: usize, cc: usize| pixels[rr * side + cc];
            let sum = at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1);
            out.push(sum / 4.0);
        }
    }
    out
}

fn render_pyramid<R: Rng>(spec: &SyntheticSpec, coverage: f64, index: usize, rng: &mut R) -> Result<TilePyramid> {
    let mut side = spec.tile_side_fine;
    let mut px = render_fine_tile(spec, coverage, rng);
    let mut tiles = vec![Tile::new(side, px.clone())?];
    for _ in 1..spec.levels {
        px = downsample(&px, side);
        side /= 2;
        tiles.push(Tile::new(side, px.clone())?);
    }
    tiles.reverse();
    let coords = ((index / 8) as u32, (index % 8) as u32);
    Ok(TilePyramid::new(tiles, coords)?)
}

fn render_bag(spec: &SyntheticSpec, row: &GroundTruthRow) -> Result<Bag> {
    let mut rng = stream(spec.rng_seed, &format!("{}/tiles", row.patient_id));
    let (lo, hi) = spec.instances_per_bag;
    let n = rng.random_range(lo..=hi);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let coverage = if row.source == Source::Tumor {
            let jitter = spec.coverage_jitter * rng.random_range(-1.0..=1.0);
            (row.lesion_fraction + jitter).clamp(0.0, 1.0)
        } else {
            0.0
        };
        instances.push(render_pyramid(spec, coverage, i, &mut rng)?);
    }
    let survival = match row.source {
        Source::Tumor => SurvivalRecord::new(row.time_months, row.event, spec.threshold_months)?,
        Source::Normal => SurvivalRecord::unlabeled(row.time_months, row.event)?,
    };
    Ok(Bag::new(row.patient_id.clone(), instances, survival, row.source)?)
}

pub fn generate_cohort(spec: &SyntheticSpec) -> Result<Cohort> {
    let mut truth = draw_outcomes(spec)?;
    truth.extend((0..spec.n_normals).map(|k| GroundTruthRow {
        patient_id: normal_id(k),
        source: Source::Normal,
        lesion_fraction: 0.0,
        latent_time: None,
        censor_time: None,
        time_months: 0.0,
        event: false,
    }));
    let bags = truth.iter().map(|row| render_bag(spec, row)).collect::<Result<_>>()?;
    Ok(Cohort { bags, truth })
}
