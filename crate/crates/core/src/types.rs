use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::risk::{risk_status, RiskStatus};

/// Side length in pixels of one square token.
pub const TOKEN_SIDE: usize = 16;

/// Square grayscale tile with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    side: usize,
    pixels: Vec<f32>,
}

impl Tile {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || side % TOKEN_SIDE != 0 {
            return Err(CoreError::InvalidInput(format!(
                "tile side {side} is not a positive multiple of {TOKEN_SIDE}"
            )));
        }
        if pixels.len() != side * side {
            return Err(CoreError::InvalidInput(format!(
                "tile of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f32) -> Result<Self> {
        Self::new(side, vec![value; side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.side / TOKEN_SIDE
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }
}

/// One instance: the same tissue region at `S` magnifications, coarse to fine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePyramid {
    tiles: Vec<Tile>,
    coordinates: (u32, u32),
}

impl TilePyramid {
    /// Each level must be exactly twice the side of the previous one.
    pub fn new(tiles: Vec<Tile>, coordinates: (u32, u32)) -> Result<Self> {
        if tiles.is_empty() {
            return Err(CoreError::InvalidInput("tile pyramid has no levels".into()));
        }
        for pair in tiles.windows(2) {
            if pair[1].side() != 2 * pair[0].side() {
                return Err(CoreError::InvalidInput(format!(
                    "pyramid levels must double in side (coarse to fine), got {} then {}",
                    pair[0].side(),
                    pair[1].side()
                )));
            }
        }
        Ok(Self { tiles, coordinates })
    }

    pub fn levels(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Zero-based level, 0 = coarsest.
    pub fn tile(&self, level: usize) -> &Tile {
        &self.tiles[level]
    }

    pub fn coordinates(&self) -> (u32, u32) {
        self.coordinates
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    time_months: f64,
    event: bool,
    risk_status: RiskStatus,
    pub predicted_risk: Option<f64>,
}

impl SurvivalRecord {
    pub fn new(time_months: f64, event: bool, threshold_months: f64) -> Result<Self> {
        let risk_status = risk_status(time_months, event, threshold_months)?;
        Ok(Self {
            time_months,
            event,
            risk_status,
            predicted_risk: None,
        })
    }

    /// Record for a control bag; never carries a risk label.
    pub fn unlabeled(time_months: f64, event: bool) -> Result<Self> {
        if !(time_months >= 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "survival time must be nonnegative, got {time_months}"
            )));
        }
        Ok(Self {
            time_months,
            event,
            risk_status: RiskStatus::Undefined,
            predicted_risk: None,
        })
    }

    pub fn time_months(&self) -> f64 {
        self.time_months
    }

    pub fn event(&self) -> bool {
        self.event
    }

    pub fn risk_status(&self) -> RiskStatus {
        self.risk_status
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Tumor,
    Normal,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Tumor => "TUMOR",
            Source::Normal => "NORMAL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TUMOR" => Ok(Source::Tumor),
            "NORMAL" => Ok(Source::Normal),
            other => Err(CoreError::InvalidInput(format!("unknown source `{other}`"))),
        }
    }
}

/// A patient: the instances cut from their slides plus survival follow-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    patient_id: String,
    instances: Vec<TilePyramid>,
    survival: SurvivalRecord,
    source: Source,
}

impl Bag {
    pub fn new(
        patient_id: impl Into<String>,
        instances: Vec<TilePyramid>,
        survival: SurvivalRecord,
        source: Source,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if instances.is_empty() {
            return Err(CoreError::InvalidInput(format!(
                "bag {patient_id} has no instances"
            )));
        }
        let levels = instances[0].levels();
        let sides: Vec<usize> = instances[0].tiles().iter().map(Tile::side).collect();
        for inst in &instances {
            let s: Vec<usize> = inst.tiles().iter().map(Tile::side).collect();
            if inst.levels() != levels || s != sides {
                return Err(CoreError::InvalidInput(format!(
                    "bag {patient_id} mixes pyramid geometries"
                )));
            }
        }
        let survival = match source {
            Source::Tumor => survival,
            Source::Normal => SurvivalRecord {
                risk_status: RiskStatus::Undefined,
                ..survival
            },
        };
        Ok(Self {
            patient_id,
            instances,
            survival,
            source,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn instances(&self) -> &[TilePyramid] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn survival(&self) -> &SurvivalRecord {
        &self.survival
    }

    pub fn survival_mut(&mut self) -> &mut SurvivalRecord {
        &mut self.survival
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn is_tumor(&self) -> bool {
        self.source == Source::Tumor
    }

    pub fn risk_status(&self) -> RiskStatus {
        self.survival.risk_status
    }

    /// Same bag with its survival record replaced (used by label-permutation controls).
    pub fn with_survival(&self, survival: SurvivalRecord) -> Self {
        let mut b = self.clone();
        b.survival = match b.source {
            Source::Tumor => survival,
            Source::Normal => SurvivalRecord {
                risk_status: RiskStatus::Undefined,
                ..survival
            },
        };
        b
    }
}
