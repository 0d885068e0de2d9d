//! Dataset directories on disk.
//!
//! Each split lives in its own directory holding `meta.json`, `data.csv`
//! (`id,grade,path`), `truth.csv` (`id,true_grade,latent,poor_quality`) and an `images/`
//! folder. An image file is two little-endian `u32` (height, width)
//! followed by `height·width` little-endian `f64` values.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Dataset, Image, Sample, Split, SyntheticSpec};
use super::ModelError;
use crate::memory::NUM_GRADES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub spec: SyntheticSpec,
}

pub fn write_image(path: &Path, image: &Image) -> Result<(), ModelError> {
    let mut buf = Vec::with_capacity(8 + 8 * image.data.len());
    for d in [image.height, image.width] {
        let d = u32::try_from(d).map_err(|_| ModelError::Dataset("image dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image, ModelError> {
    let bytes = fs::read(path)?;
    let bad = || ModelError::Dataset(format!("{} is not a valid image file", path.display()));
    if bytes.len() < 8 {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + 8 * h * w {
        return Err(bad());
    }
    let data = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Image::new(h, w, data)
}

pub fn write_split(dir: &Path, split: Split, samples: &[Sample], spec: &SyntheticSpec) -> Result<(), ModelError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let meta = SplitMeta { split, count: samples.len(), seed: spec.seed, spec: spec.clone() };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    let mut data = String::from("id,grade,path\n");
    let mut truth = String::from("id,true_grade,latent,poor_quality\n");
    for s in samples {
        let rel = format!("images/{:06}.bin", s.id);
        write_image(&dir.join(&rel), &s.image)?;
        data.push_str(&format!("{},{},{}\n", s.id, s.grade, rel));
        truth.push_str(&format!("{},{},{:?},{}\n", s.id, s.true_grade, s.latent, u8::from(s.poor_quality)));
    }
    fs::File::create(dir.join("data.csv"))?.write_all(data.as_bytes())?;
    fs::File::create(dir.join("truth.csv"))?.write_all(truth.as_bytes())?;
    Ok(())
}

/// Write all splits under `root/{train,val,test}`.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<(), ModelError> {
    for split in Split::ALL {
        write_split(&root.join(split.name()), split, data.split(split), &data.spec)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(field: Option<&str>, what: &str, line: usize) -> Result<T, ModelError> {
    field
        .and_then(|f| f.trim().parse().ok())
        .ok_or_else(|| ModelError::Dataset(format!("bad {what} on line {line}")))
}

/// Read one split directory. `truth.csv` is optional; without it the
/// observed grade stands in for the true grade.
pub fn read_split(dir: &Path) -> Result<(SplitMeta, Vec<Sample>), ModelError> {
    let meta: SplitMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let csv = fs::read_to_string(dir.join("data.csv"))?;
    let mut lines = csv.lines();
    if lines.next().map(str::trim) != Some("id,grade,path") {
        return Err(ModelError::Dataset("data.csv must start with the header id,grade,path".into()));
    }
    let truth = match fs::read_to_string(dir.join("truth.csv")) {
        Ok(t) => Some(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut truth_rows = truth.as_deref().map(|t| t.lines().skip(1));
    let mut samples = Vec::with_capacity(meta.count);
    for (i, line) in lines.enumerate() {
        let mut f = line.split(',');
        let id: usize = parse(f.next(), "id", i + 2)?;
        let grade: usize = parse(f.next(), "grade", i + 2)?;
        let path: String = parse(f.next(), "path", i + 2)?;
        if grade >= NUM_GRADES {
            return Err(ModelError::Dataset(format!("grade {grade} out of range on line {}", i + 2)));
        }
        let image = read_image(&dir.join(path))?;
        let (true_grade, latent, poor_quality) = match truth_rows.as_mut().and_then(Iterator::next) {
            Some(row) => {
                let mut t = row.split(',');
                let tid: usize = parse(t.next(), "truth id", i + 2)?;
                if tid != id {
                    return Err(ModelError::Dataset(format!("truth.csv out of step with data.csv at id {id}")));
                }
                let true_grade = parse(t.next(), "true grade", i + 2)?;
                let latent = parse(t.next(), "latent", i + 2)?;
                let poor: u8 = parse(t.next(), "poor quality", i + 2)?;
                (true_grade, latent, poor == 1)
            }
            None => (grade, grade as f64, false),
        };
        samples.push(Sample { id, grade, true_grade, latent, poor_quality, image });
    }
    if samples.len() != meta.count {
        return Err(ModelError::Dataset(format!("meta.json lists {} items, data.csv has {}", meta.count, samples.len())));
    }
    Ok((meta, samples))
}
