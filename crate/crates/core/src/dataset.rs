//! Manifest-backed datasets.
//!
//! A manifest is a CSV with header `path,subject_id,frame_index,labels`.
//! `labels` holds semicolon-separated integers (binary, or intensities when
//! the AU spec declares a threshold) and is empty for unlabeled images.
//! Each image may carry sidecars next to it: `<stem>.landmarks.txt` with one
//! `x y` row per landmark, and `<stem>.flo` with the flow to the frame
//! `flow_step` later.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{binarize_intensity, Config};
use crate::error::{Error, Result};
use crate::flow::{prepare_flow_target, FlowProvider, FlowSource};
use crate::geometry::{alignment_transform, Similarity};
use crate::image::Image;
use crate::landmarks::{read_landmarks, Point};
use crate::sample::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub subject_id: String,
    pub frame_index: usize,
    #[serde(with = "label_field")]
    pub labels: Option<Vec<i32>>,
}

mod label_field {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<i32>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str(""),
            Some(l) => s.serialize_str(
                &l.iter().map(i32::to_string).collect::<Vec<_>>().join(";"),
            ),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<i32>>, D::Error> {
        let raw = String::deserialize(d)?;
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(None);
        }
        raw.split(';')
            .map(|t| t.trim().parse::<i32>().map_err(serde::de::Error::custom))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

pub fn landmark_path(image: &Path) -> PathBuf {
    image.with_extension("landmarks.txt")
}

pub fn flow_path(image: &Path) -> PathBuf {
    image.with_extension("flo")
}

/// Reads a manifest; relative image paths resolve against `root`, or the
/// manifest's directory when `root` is `None`.
pub fn read_manifest(path: impl AsRef<Path>, root: Option<&Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Data(format!("manifest {} not found", path.display())));
    }
    let base = root
        .map(Path::to_path_buf)
        .or_else(|| path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        let mut rec: ManifestRecord = rec?;
        if rec.path.is_relative() {
            rec.path = base.join(&rec.path);
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Indexed access to samples, shared by in-memory and on-disk datasets.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn subject(&self, index: usize) -> &str;
    fn load(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn subject(&self, index: usize) -> &str {
        &self[index].subject_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Restriction of a source to a subset of indices.
pub struct Subset<'a, S: SampleSource + ?Sized> {
    pub source: &'a S,
    pub indices: Vec<usize>,
}

impl<S: SampleSource + ?Sized> SampleSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn subject(&self, index: usize) -> &str {
        self.source.subject(self.indices[index])
    }

    fn load(&self, index: usize) -> Result<Sample> {
        self.source.load(self.indices[index])
    }
}

/// Indices of `source` whose subject is in `subjects`.
pub fn indices_for_subjects<S: SampleSource + ?Sized>(source: &S, subjects: &[String]) -> Vec<usize> {
    (0..source.len())
        .filter(|&i| subjects.iter().any(|s| s == source.subject(i)))
        .collect()
}

/// Lazily loaded manifest dataset.
pub struct ManifestDataset<'a> {
    records: Vec<ManifestRecord>,
    config: Config,
    provider: Option<&'a dyn FlowProvider>,
    by_frame: HashMap<(String, usize), usize>,
}

impl<'a> ManifestDataset<'a> {
    pub fn new(records: Vec<ManifestRecord>, config: &Config, provider: Option<&'a dyn FlowProvider>) -> Self {
        let by_frame = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.subject_id.clone(), r.frame_index), i))
            .collect();
        ManifestDataset {
            records,
            config: config.clone(),
            provider,
            by_frame,
        }
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    fn labels(&self, rec: &ManifestRecord) -> Result<Option<Vec<u8>>> {
        let Some(raw) = &rec.labels else {
            return Ok(None);
        };
        let spec = &self.config.au;
        if raw.len() != spec.num_aus() {
            return Err(Error::Label(format!(
                "{}: {} labels for {} AUs",
                rec.path.display(),
                raw.len(),
                spec.num_aus()
            )));
        }
        raw.iter()
            .map(|&v| {
                if spec.positive_intensity_threshold.is_some() {
                    binarize_intensity(v, spec)
                } else if v == 0 || v == 1 {
                    Ok(v as u8)
                } else {
                    Err(Error::Label(format!("{}: non-binary label {v}", rec.path.display())))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn landmarks(&self, rec: &ManifestRecord) -> Result<Option<Vec<Point>>> {
        let p = landmark_path(&rec.path);
        p.exists().then(|| read_landmarks(&p)).transpose()
    }
}

impl SampleSource for ManifestDataset<'_> {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn subject(&self, index: usize) -> &str {
        &self.records[index].subject_id
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let rec = &self.records[index];
        let size = self.config.hyper.aligned_size;
        let raw = Image::load(&rec.path)?;
        let lm = self.landmarks(rec)?;
        let already_aligned = raw.width() == size && raw.height() == size;
        let transform = match (&lm, already_aligned) {
            (_, true) => Similarity::identity(),
            (Some(lm), false) => alignment_transform(lm, size)?,
            (None, false) => {
                return Err(Error::Data(format!(
                    "{} is {}x{} and has no landmarks to align it",
                    rec.path.display(),
                    raw.width(),
                    raw.height()
                )))
            }
        };
        let image = if already_aligned {
            raw.clone()
        } else {
            crate::geometry::warp(&raw, &transform, size)
        };
        let landmarks = lm.map(|l| l.iter().map(|&p| transform.apply(p)).collect());

        let later = self
            .by_frame
            .get(&(rec.subject_id.clone(), rec.frame_index + self.config.hyper.flow_step));
        let flow_target = match later {
            None => None,
            Some(&j) => {
                let next = Image::load(&self.records[j].path)?;
                let flo = flow_path(&rec.path);
                let source = FlowSource {
                    flo_path: Some(&flo),
                    provider: self.provider,
                };
                let name = format!("{}#{}->{}", rec.subject_id, rec.frame_index, self.records[j].frame_index);
                Some(prepare_flow_target(&raw, &next, &transform, size, &source, &name)?.flow)
            }
        };
        let labels = self.labels(rec)?;
        let sample = Sample {
            image,
            is_labeled: labels.is_some(),
            labels,
            landmarks,
            flow_target,
            mask: None,
            subject_id: rec.subject_id.clone(),
        };
        sample.check(self.config.au.num_aus())?;
        Ok(sample)
    }
}

/// Writes samples as PNG frames with landmark and flow sidecars plus a manifest.
pub fn export_samples(samples: &[Sample], dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut frame_counter: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        let frame = frame_counter.entry(&s.subject_id).or_insert(0);
        let name = format!("{}_{:05}.png", s.subject_id, frame);
        let path = dir.join(&name);
        s.image.save(&path)?;
        if let Some(lm) = &s.landmarks {
            crate::landmarks::write_landmarks(landmark_path(&path), lm)?;
        }
        if let Some(f) = &s.flow_target {
            f.save(flow_path(&path))?;
        }
        records.push(ManifestRecord {
            path: PathBuf::from(name),
            subject_id: s.subject_id.clone(),
            frame_index: *frame,
            labels: s.labels.as_ref().map(|l| l.iter().map(|&v| i32::from(v)).collect()),
        });
        *frame += 1;
    }
    let manifest = dir.join(manifest_name);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
