//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.json
//! DIR/source/000000.png        RGB image
//! DIR/source/000000_labels.png 8-bit class ids
//! DIR/train/000000_adverse.png, _normal.png, _confidence.bin
//! DIR/val/000000_adverse.png, _normal.png, _clean.png, _labels.png, _confidence.bin
//! ```
//!
//! Images are 8-bit PNG. Every generated image is quantized to `k/255`, so
//! reading back reproduces the in-memory values exactly. Confidence grids
//! are little-endian f32, row-major.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, DataConfig, Dataset, Image, PairedSample, Scene, TrainPair};
use crate::error::{Error, Result};

pub const SCHEMA: &str = "frest-kit/dataset";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub seed: u64,
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub seed: u64,
    pub condition: Condition,
    pub severity: f64,
    pub adverse: String,
    pub normal: String,
    pub confidence: String,
    /// Present on validation pairs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub source: Vec<SourceEntry>,
    pub train: Vec<PairEntry>,
    pub val: Vec<PairEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.source.len() + self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    w.write_image_data(bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Dataset(format!("{}: expected 8-bit samples", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let bytes: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (w, h, color, bytes) = read_png(path)?;
    if color != png::ColorType::Rgb {
        return Err(Error::Dataset(format!("{}: expected RGB", path.display())));
    }
    Ok(Image::from_shape_vec((h, w, 3), bytes.into_iter().map(|b| b as f64 / 255.0).collect())
        .expect("buffer matches header"))
}

pub fn write_labels(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let bytes: Vec<u8> = labels.iter().copied().collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Array2<u8>> {
    let (w, h, color, bytes) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Dataset(format!("{}: expected grayscale", path.display())));
    }
    Ok(Array2::from_shape_vec((h, w), bytes).expect("buffer matches header"))
}

fn write_confidence(path: &Path, conf: &Array2<f64>) -> Result<()> {
    let bytes: Vec<u8> = conf.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_confidence(path: &Path, side: usize) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side * side * 4 {
        return Err(Error::Dataset(format!("{}: expected {} bytes, found {}", path.display(), side * side * 4, bytes.len())));
    }
    let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(Array2::from_shape_vec((side, side), vals).expect("length checked"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every split plus `manifest.json` under `dir`.
pub fn export_dataset(dataset: &Dataset, cfg: &DataConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    for split in ["source", "train", "val"] {
        create_dir(&dir.join(split))?;
    }
    let mut source = Vec::with_capacity(dataset.source.len());
    for (i, s) in dataset.source.iter().enumerate() {
        let e = SourceEntry { seed: s.seed, image: format!("source/{i:06}.png"), labels: format!("source/{i:06}_labels.png") };
        write_image(&dir.join(&e.image), &s.image)?;
        write_labels(&dir.join(&e.labels), &s.labels)?;
        source.push(e);
    }
    let pair_entry = |split: &str, i: usize, p: &TrainPair, labeled: bool| PairEntry {
        seed: p.seed,
        condition: p.condition,
        severity: p.severity,
        adverse: format!("{split}/{i:06}_adverse.png"),
        normal: format!("{split}/{i:06}_normal.png"),
        confidence: format!("{split}/{i:06}_confidence.bin"),
        labels: labeled.then(|| format!("{split}/{i:06}_labels.png")),
        clean: labeled.then(|| format!("{split}/{i:06}_clean.png")),
    };
    let write_pair = |e: &PairEntry, p: &TrainPair| -> Result<()> {
        write_image(&dir.join(&e.adverse), &p.adverse)?;
        write_image(&dir.join(&e.normal), &p.normal)?;
        write_confidence(&dir.join(&e.confidence), &p.confidence)
    };
    let mut train = Vec::with_capacity(dataset.train.len());
    for (i, p) in dataset.train.iter().enumerate() {
        let e = pair_entry("train", i, p, false);
        write_pair(&e, p)?;
        train.push(e);
    }
    let mut val = Vec::with_capacity(dataset.val.len());
    for (i, p) in dataset.val.iter().enumerate() {
        let e = pair_entry("val", i, &p.pair, true);
        write_pair(&e, &p.pair)?;
        write_labels(&dir.join(e.labels.as_ref().expect("val")), &p.labels)?;
        write_image(&dir.join(e.clean.as_ref().expect("val")), &p.clean)?;
        val.push(e);
    }
    let manifest = Manifest { schema: SCHEMA.into(), version: VERSION, seed, config: cfg.clone(), source, train, val };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema != SCHEMA || m.version != VERSION {
        return Err(Error::Dataset(format!("unsupported manifest {} v{}", m.schema, m.version)));
    }
    Ok(m)
}

pub fn import_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let m = read_manifest(dir)?;
    let side = m.config.image_size / m.config.patch_size;
    let source = m
        .source
        .iter()
        .map(|e| Ok(Scene { image: read_image(&dir.join(&e.image))?, labels: read_labels(&dir.join(&e.labels))?, seed: e.seed }))
        .collect::<Result<_>>()?;
    let read_pair = |e: &PairEntry| -> Result<TrainPair> {
        Ok(TrainPair {
            seed: e.seed,
            condition: e.condition,
            severity: e.severity,
            adverse: read_image(&dir.join(&e.adverse))?,
            normal: read_image(&dir.join(&e.normal))?,
            confidence: read_confidence(&dir.join(&e.confidence), side)?,
        })
    };
    let train = m.train.iter().map(read_pair).collect::<Result<_>>()?;
    let val = m
        .val
        .iter()
        .map(|e| {
            let missing = || Error::Dataset(format!("val pair {} lacks labels or clean image", e.seed));
            Ok(PairedSample {
                pair: read_pair(e)?,
                labels: read_labels(&dir.join(e.labels.as_ref().ok_or_else(missing)?))?,
                clean: read_image(&dir.join(e.clean.as_ref().ok_or_else(missing)?))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((m, Dataset { source, train, val }))
}
