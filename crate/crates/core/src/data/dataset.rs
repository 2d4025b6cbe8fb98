//! Dataset directories: `manifest.json` plus `samples/NNNN.tns` tensor files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Mask, Region, RegionRecord, Sample};
use crate::container;
use crate::error::{Error, Result};

/// Samples plus the class count they were drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: usize,
    file: String,
    label: usize,
    labels: Vec<usize>,
    difficult: bool,
    height: usize,
    width: usize,
    regions: Vec<RegionRecord>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        s.validate()?;
        let file = format!("samples/{:04}.tns", s.id);
        container::write(
            &dir.join(&file),
            &json!({ "sample_id": s.id }),
            &[("image".to_string(), &s.image)],
        )?;
        records.push(SampleRecord {
            id: s.id,
            file,
            label: s.label,
            labels: s.labels.clone(),
            difficult: s.difficult,
            height: s.height(),
            width: s.width(),
            regions: s
                .regions
                .iter()
                .map(|r| RegionRecord {
                    class: r.class,
                    bbox: r.bbox,
                    mask_runs: r.mask.to_runs(),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        num_classes: ds.num_classes,
        samples: records,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("manifest: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in manifest.samples {
        let file = dir.join(&rec.file);
        if !file.exists() {
            return Err(Error::MissingSample { id: rec.id, path: file });
        }
        let (_, tensors) = container::read(&file)?;
        let image = tensors
            .into_iter()
            .find(|(n, _)| n == "image")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(&file, format!("sample {} has no image tensor", rec.id)))?;
        if image.shape() != [3, rec.height, rec.width] {
            return Err(Error::format(
                &file,
                format!(
                    "sample {}: image shape {:?} disagrees with manifest {}x{}",
                    rec.id,
                    image.shape(),
                    rec.height,
                    rec.width
                ),
            ));
        }
        let regions = rec
            .regions
            .iter()
            .map(|r| {
                if r.class >= manifest.num_classes {
                    return Err(Error::invalid(format!(
                        "sample {}: region class {} out of range",
                        rec.id, r.class
                    )));
                }
                Ok(Region {
                    class: r.class,
                    bbox: r.bbox,
                    mask: Mask::from_runs(rec.width, rec.height, &r.mask_runs)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = Sample {
            id: rec.id,
            image,
            label: rec.label,
            labels: rec.labels,
            regions,
            difficult: rec.difficult,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        samples,
    })
}
