//! PNG tile directories described by a CSV manifest.
//!
//! Each manifest row is one instance:
//! `patient_id,source,time_months,event,tile_s1,...,tile_sS` with tile paths
//! ordered coarse to fine and resolved against the dataset root. Rows sharing a
//! patient id form one bag, in order of first appearance.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dcmil_core::{Bag, Source, SurvivalRecord, Tile, TilePyramid, TOKEN_SIDE};

use crate::error::{DataError, Result};
use crate::synthetic::{Cohort, GroundTruthRow};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
const FIXED_COLUMNS: [&str; 4] = ["patient_id", "source", "time_months", "event"];

pub fn read_png(path: &Path) -> Result<Tile> {
    let unreadable = |msg: String| DataError::UnreadableImage {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| unreadable(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unreadable("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| unreadable(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(unreadable(format!("tile is {w}x{h}, expected a square")));
    }
    if w % TOKEN_SIDE != 0 {
        return Err(DataError::TileSide {
            path: path.to_path_buf(),
            side: w,
        });
    }
    let channels = info.color_type.samples();
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf[..info.line_size * h].chunks(info.line_size) {
        for px in row[..w * channels].chunks(channels) {
            let v = match channels {
                1 | 2 => f32::from(px[0]),
                _ => 0.299 * f32::from(px[0]) + 0.587 * f32::from(px[1]) + 0.114 * f32::from(px[2]),
            };
            pixels.push(v / 255.0);
        }
    }
    Ok(Tile::new(w, pixels)?)
}

pub fn write_png(path: &Path, tile: &Tile) -> Result<()> {
    let file = File::create(path)?;
    let side = tile.side() as u32;
    let mut enc = png::Encoder::new(BufWriter::new(file), side, side);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = tile
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let encode_err = |e: png::EncodingError| DataError::UnreadableImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Writes tiles, the manifest and the generator's ground-truth table under `root`.
pub fn write_cohort(root: &Path, cohort: &Cohort) -> Result<()> {
    std::fs::create_dir_all(root.join("tiles"))?;
    let levels = cohort.bags.first().map_or(0, |b| b.instances()[0].levels());
    let mut manifest = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=levels).map(|s| format!("tile_s{s}")));
    manifest.write_record(&header)?;
    for bag in &cohort.bags {
        let dir = root.join("tiles").join(bag.patient_id());
        std::fs::create_dir_all(&dir)?;
        for (i, inst) in bag.instances().iter().enumerate() {
            let mut record = vec![
                bag.patient_id().to_string(),
                bag.source().as_str().to_string(),
                format!("{}", bag.survival().time_months()),
                u8::from(bag.survival().event()).to_string(),
            ];
            for (s, tile) in inst.tiles().iter().enumerate() {
                let rel = format!("tiles/{}/i{i:03}_s{}.png", bag.patient_id(), s + 1);
                write_png(&root.join(&rel), tile)?;
                record.push(rel);
            }
            manifest.write_record(&record)?;
        }
    }
    manifest.flush()?;
    write_ground_truth(&root.join(GROUND_TRUTH_FILE), &cohort.truth)
}

pub fn write_ground_truth(path: &Path, truth: &[GroundTruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "patient_id",
        "source",
        "lesion_fraction",
        "latent_time",
        "censor_time",
        "time_months",
        "event",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in truth {
        w.write_record([
            r.patient_id.clone(),
            r.source.as_str().to_string(),
            r.lesion_fraction.to_string(),
            opt(r.latent_time),
            opt(r.censor_time),
            r.time_months.to_string(),
            u8::from(r.event).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct PendingBag {
    patient_id: String,
    source: Source,
    time: f64,
    event: bool,
    instances: Vec<TilePyramid>,
}

fn parse_event(s: &str, line: usize) -> Result<bool> {
    match s.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(DataError::Manifest {
            line,
            msg: format!("event must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Builds bags from a manifest; relative tile paths are resolved against `root`.
pub fn ingest_tiles(root: &Path, manifest: &Path, threshold_months: f64) -> Result<Vec<Bag>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(manifest)?;
    let header = reader.headers()?.clone();
    if header.len() <= FIXED_COLUMNS.len()
        || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b)
    {
        return Err(DataError::Manifest {
            line: 1,
            msg: format!(
                "header must be `{},tile_s1,...`",
                FIXED_COLUMNS.join(",")
            ),
        });
    }
    let levels = header.len() - FIXED_COLUMNS.len();
    let mut pending: Vec<PendingBag> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let field = |i: usize| record.get(i).unwrap_or("");
        let patient_id = field(0).to_string();
        if patient_id.is_empty() {
            return Err(DataError::Manifest {
                line,
                msg: "empty patient_id".into(),
            });
        }
        let source = Source::parse(field(1))?;
        let time: f64 = field(2).parse().map_err(|_| DataError::Manifest {
            line,
            msg: format!("bad time_months `{}`", field(2)),
        })?;
        let event = parse_event(field(3), line)?;
        let mut tiles = Vec::with_capacity(levels);
        for level in 1..=levels {
            let rel = field(FIXED_COLUMNS.len() + level - 1);
            if rel.is_empty() {
                return Err(DataError::MissingLevel {
                    patient: patient_id,
                    line,
                    level,
                });
            }
            let path: PathBuf = root.join(rel);
            tiles.push(read_png(&path)?);
        }
        let within_bag = pending
            .iter()
            .find(|b| b.patient_id == patient_id)
            .map_or(0, |b| b.instances.len());
        let pyramid = TilePyramid::new(tiles, (within_bag as u32, 0))?;
        match pending.iter_mut().find(|b| b.patient_id == patient_id) {
            Some(bag) => {
                if bag.source != source || bag.time != time || bag.event != event {
                    return Err(DataError::Manifest {
                        line,
                        msg: format!("patient {patient_id} has inconsistent clinical fields"),
                    });
                }
                bag.instances.push(pyramid);
            }
            None => pending.push(PendingBag {
                patient_id,
                source,
                time,
                event,
                instances: vec![pyramid],
            }),
        }
    }
    pending
        .into_iter()
        .map(|p| {
            let survival = match p.source {
                Source::Tumor => SurvivalRecord::new(p.time, p.event, threshold_months)?,
                Source::Normal => SurvivalRecord::unlabeled(p.time, p.event)?,
            };
            Ok(Bag::new(p.patient_id, p.instances, survival, p.source)?)
        })
        .collect()
}
