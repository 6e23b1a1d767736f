//! On-disk layout for datasets: binary PPM (P6) images, binary PGM (P5)
//! masks, JSON sidecar metadata, and one JSON manifest per split.
//!
//! The codecs are strict: headers must parse, payloads must be complete,
//! and errors name the byte offset or field that failed. Pixel values are
//! stored as `round(255 * v)`, so a save/load round trip moves any channel
//! by at most 1/510.

use crate::error::{Error, Result};
use crate::synth::{Dataset, GenConfig, Sample};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H, W, 3]` image as binary PPM with maxval 255.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "PPM encoder expects [H, W, 3], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes an `[H, W]` map as binary PGM with maxval 255.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Dimension(format!(
            "PGM encoder expects [H, W], got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Largest accepted image dimension; guards allocation on corrupt headers.
const MAX_DIM: usize = 1 << 16;

struct PnmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmParser<'a> {
    fn fail<T>(&self, what: &str) -> Result<T> {
        Err(Error::Format(format!("{what} at byte {}", self.pos)))
    }

    fn magic(&mut self, want: &str) -> Result<()> {
        if self.bytes.len() < 2 || &self.bytes[..2] != want.as_bytes() {
            return self.fail(&format!("missing {want} magic"));
        }
        self.pos = 2;
        Ok(())
    }

    /// Skips whitespace and `#` comments, then reads a decimal integer.
    fn token(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(&format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.fail(&format!("unreadable {what}")), Ok)
    }

    /// The single whitespace byte separating maxval from the payload.
    fn payload_separator(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail("expected whitespace before payload"),
        }
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            self.pos = self.bytes.len();
            return self.fail(&format!(
                "payload truncated, needed {n} bytes from byte {}",
                end - n
            ));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        if self.pos != self.bytes.len() {
            return self.fail("trailing data after payload");
        }
        Ok(slice)
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        let w = self.token("width")?;
        let h = self.token("height")?;
        if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
            return self.fail(&format!("unreasonable dimensions {w}x{h}"));
        }
        let maxval = self.token("maxval")?;
        if maxval != 255 {
            return self.fail(&format!("unsupported maxval {maxval}"));
        }
        self.payload_separator()?;
        Ok((w, h))
    }
}

/// Decodes binary PPM into an `[H, W, 3]` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut p = PnmParser { bytes, pos: 0 };
    p.magic("P6")?;
    let (w, h) = p.dims()?;
    let data = p.payload(w * h * 3)?;
    Tensor::new(&[h, w, 3], data.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Decodes binary PGM into an `[H, W]` tensor with values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut p = PnmParser { bytes, pos: 0 };
    p.magic("P5")?;
    let (w, h) = p.dims()?;
    let data = p.payload(w * h)?;
    Tensor::new(&[h, w], data.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Sidecar record saved next to each image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub label: usize,
    pub domain: String,
    pub seed: u64,
}

/// Writes `{id}.ppm`, `{id}.mask.pgm`, and `{id}.json` into `dir`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{}.ppm", sample.id)),
        encode_ppm(&sample.image)?,
    )?;
    fs::write(
        dir.join(format!("{}.mask.pgm", sample.id)),
        encode_pgm(&sample.mask)?,
    )?;
    let meta = SampleMeta {
        id: sample.id.clone(),
        label: sample.label,
        domain: sample.domain.clone(),
        seed: sample.seed,
    };
    fs::write(
        dir.join(format!("{}.json", sample.id)),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(())
}

/// Reads back what [`save_sample`] wrote.
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = decode_ppm(&fs::read(dir.join(format!("{id}.ppm")))?)?;
    let mask = decode_pgm(&fs::read(dir.join(format!("{id}.mask.pgm")))?)?;
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format(format!(
            "mask for '{id}' is not binary in field 'mask'"
        )));
    }
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join(format!("{id}.json")))?)?;
    if meta.label > 1 {
        return Err(Error::Format(format!(
            "label {} outside {{0, 1}} in field 'label' of {id}.json",
            meta.label
        )));
    }
    if meta.id != id {
        return Err(Error::Format(format!(
            "sidecar id '{}' does not match '{id}' in field 'id'",
            meta.id
        )));
    }
    Ok(Sample {
        id: meta.id,
        image,
        label: meta.label,
        mask,
        domain: meta.domain,
        seed: meta.seed,
    })
}

/// One manifest row; paths are relative to the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub image: String,
    pub mask: String,
    pub meta: String,
    /// Whether this sample's mask may be consulted for model selection.
    pub full_supervision: bool,
}

/// Listing of one split, saved as `{split}.json` at the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

/// Saves all samples of a split under `root/{split}/` plus the manifest.
/// The first `full_supervision_per_class` samples of each class are marked
/// as allowed for supervised model selection.
pub fn save_split(
    root: &Path,
    split: &str,
    samples: &[Sample],
    full_supervision_per_class: usize,
) -> Result<()> {
    let dir = root.join(split);
    let mut seen = [0usize; 2];
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label > 1 {
            return Err(Error::Format(format!(
                "label {} outside {{0, 1}} in field 'label' of sample '{}'",
                s.label, s.id
            )));
        }
        save_sample(&dir, s)?;
        let supervised = seen[s.label] < full_supervision_per_class;
        seen[s.label] += 1;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            label: s.label,
            image: format!("{split}/{}.ppm", s.id),
            mask: format!("{split}/{}.mask.pgm", s.id),
            meta: format!("{split}/{}.json", s.id),
            full_supervision: supervised,
        });
    }
    let manifest = SplitManifest {
        split: split.into(),
        entries,
    };
    fs::write(
        root.join(format!("{split}.json")),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a split in manifest order, returning each sample and its
/// full-supervision flag.
pub fn load_split(root: &Path, split: &str) -> Result<(Vec<Sample>, Vec<bool>)> {
    let manifest: Vec<u8> = fs::read(root.join(format!("{split}.json")))?;
    let manifest: SplitManifest = serde_json::from_slice(&manifest)?;
    let dir = root.join(&manifest.split);
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut flags = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let s = load_sample(&dir, &e.id)?;
        if s.label != e.label {
            return Err(Error::Format(format!(
                "manifest label {} disagrees with sidecar label {} in field 'label' of '{}'",
                e.label, s.label, e.id
            )));
        }
        samples.push(s);
        flags.push(e.full_supervision);
    }
    Ok((samples, flags))
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: Dataset,
    /// Per-sample supervision flags for the validation split.
    pub val_full_supervision: Vec<bool>,
    pub config: GenConfig,
}

/// Writes all three splits plus the generation config. Only validation
/// samples carry supervision flags; train and test masks stay
/// evaluation-only.
pub fn save_dataset(root: &Path, data: &Dataset, config: &GenConfig) -> Result<()> {
    fs::create_dir_all(root)?;
    save_split(root, "train", &data.train, 0)?;
    save_split(root, "val", &data.val, config.full_supervision_per_class)?;
    save_split(root, "test", &data.test, 0)?;
    fs::write(
        root.join("genconfig.json"),
        serde_json::to_vec_pretty(config)?,
    )?;
    Ok(())
}

/// Reads back what [`save_dataset`] wrote.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let config: GenConfig = serde_json::from_slice(&fs::read(root.join("genconfig.json"))?)?;
    let (train, _) = load_split(root, "train")?;
    let (val, val_full_supervision) = load_split(root, "val")?;
    let (test, _) = load_split(root, "test")?;
    Ok(LoadedDataset {
        data: Dataset { train, val, test },
        val_full_supervision,
        config,
    })
}
