//! Line-delimited JSON manifests referencing PGM frames or raw frame blobs.
//!
//! Each line is one record. An optional `header` record names the label
//! columns (and, for generated data, the rule behind each); every `study`
//! record lists its views, each either as frame file paths or as a blob of
//! concatenated 8-bit frames. Paths are relative to the manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::data::icd::normalize_icd;
use crate::data::study::{Frame, Split, Study};
use crate::data::synth::SyntheticFactors;
use crate::error::{LamaeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub labels: Vec<LabelInfo>,
    /// Generator settings as `key = value` text, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ViewEntry {
    Frames {
        frames: Vec<String>,
    },
    Blob {
        blob: String,
        frames: usize,
        width: usize,
        height: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    #[serde(default)]
    pub split: Split,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
    /// Raw ICD-10 codes; turned into labels over the header's label names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<SyntheticFactors>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header(Header),
    Study(StudyRecord),
}

/// Parsed manifest; frames are read only when a study is loaded.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: Option<Header>,
    pub records: Vec<StudyRecord>,
}

impl Manifest {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = fs::File::open(&path).map_err(|e| LamaeError::io(&path, e))?;
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LamaeError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| LamaeError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            match rec {
                Record::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                Record::Header(_) => {
                    return Err(LamaeError::Data(format!(
                        "{}:{}: header must be the first record",
                        path.display(),
                        i + 1
                    )))
                }
                Record::Study(s) => records.push(s),
            }
        }
        Ok(Self { path, header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn base(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Reads and validates study `i`.
    pub fn load(&self, i: usize) -> Result<Study> {
        let rec = &self.records[i];
        let base = self.base();
        let mut views = Vec::with_capacity(rec.views.len());
        for entry in &rec.views {
            views.push(read_view(&base, &rec.study_id, entry)?);
        }
        let labels = self.resolve_labels(rec)?;
        let study = Study {
            id: rec.study_id.clone(),
            split: rec.split,
            views,
            labels,
            target: rec.target,
            factors: rec.factors.clone(),
        };
        study.validate()?;
        Ok(study)
    }

    fn resolve_labels(&self, rec: &StudyRecord) -> Result<Option<Vec<f64>>> {
        let names: Option<Vec<&str>> = self
            .header
            .as_ref()
            .map(|h| h.labels.iter().map(|l| l.name.as_str()).collect());
        let from_codes = match (&rec.codes, &names) {
            (Some(codes), Some(names)) => {
                let cats: Vec<String> = codes.iter().map(|c| normalize_icd(c)).collect::<Result<_>>()?;
                Some(
                    names
                        .iter()
                        .map(|n| if cats.iter().any(|c| c == n) { 1.0 } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            (Some(_), None) => {
                return Err(LamaeError::Data(format!(
                    "study {} lists codes but the manifest has no label header",
                    rec.study_id
                )))
            }
            _ => None,
        };
        let labels = match (&rec.labels, from_codes) {
            (Some(l), Some(c)) if *l != c => {
                return Err(LamaeError::Data(format!(
                    "study {}: labels disagree with its codes",
                    rec.study_id
                )))
            }
            (Some(l), _) => Some(l.clone()),
            (None, c) => c,
        };
        if let (Some(l), Some(names)) = (&labels, &names) {
            if l.len() != names.len() {
                return Err(LamaeError::Data(format!(
                    "study {} has {} labels, header declares {}",
                    rec.study_id,
                    l.len(),
                    names.len()
                )));
            }
        }
        Ok(labels)
    }

    /// Lazily loads every study in manifest order.
    pub fn studies(&self) -> impl Iterator<Item = Result<Study>> + '_ {
        (0..self.records.len()).map(move |i| self.load(i))
    }

    pub fn load_all(&self) -> Result<Vec<Study>> {
        self.studies().collect()
    }
}

fn read_view(base: &Path, study: &str, entry: &ViewEntry) -> Result<Vec<Frame>> {
    match entry {
        ViewEntry::Frames { frames } => frames
            .iter()
            .map(|rel| {
                let path = base.join(rel);
                let bytes = fs::read(&path).map_err(|e| {
                    LamaeError::Data(format!("study {study}: cannot read frame {}: {e}", path.display()))
                })?;
                let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
                    .map_err(|e| LamaeError::Data(format!("study {study}: bad frame {}: {e}", path.display())))?
                    .into_luma8();
                Frame::new(img.width() as usize, img.height() as usize, img.into_raw())
            })
            .collect(),
        ViewEntry::Blob {
            blob,
            frames,
            width,
            height,
        } => {
            let path = base.join(blob);
            let bytes = fs::read(&path)
                .map_err(|e| LamaeError::Data(format!("study {study}: cannot read blob {}: {e}", path.display())))?;
            let per = width * height;
            if bytes.len() != per * frames {
                return Err(LamaeError::Data(format!(
                    "study {study}: blob {} holds {} bytes, expected {}",
                    path.display(),
                    bytes.len(),
                    per * frames
                )));
            }
            bytes
                .chunks(per)
                .map(|c| Frame::new(*width, *height, c.to_vec()))
                .collect()
        }
    }
}

pub fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| LamaeError::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(
            &frame.pixels,
            frame.width as u32,
            frame.height as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| LamaeError::Data(format!("{}: {e}", path.display())))
}

/// How `write_dataset` stores frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStorage {
    Pgm,
    Blob,
}

/// Writes frames under `dir` and a manifest `dir/manifest.jsonl`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, studies: &[Study], header: Option<&Header>, storage: FrameStorage) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| LamaeError::io(&frames_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| LamaeError::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    let mut write_line = |rec: &Record| -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| LamaeError::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| LamaeError::io(&manifest, e))
    };
    if let Some(h) = header {
        write_line(&Record::Header(h.clone()))?;
    }
    for s in studies {
        s.validate()?;
        let mut views = Vec::with_capacity(s.views.len());
        for (j, view) in s.views.iter().enumerate() {
            match storage {
                FrameStorage::Pgm => {
                    let mut paths = Vec::with_capacity(view.len());
                    for (k, f) in view.iter().enumerate() {
                        let rel = format!("frames/{}_v{j}_f{k}.pgm", s.id);
                        write_pgm(&dir.join(&rel), f)?;
                        paths.push(rel);
                    }
                    views.push(ViewEntry::Frames { frames: paths });
                }
                FrameStorage::Blob => {
                    let rel = format!("frames/{}_v{j}.bin", s.id);
                    let bytes: Vec<u8> = view.iter().flat_map(|f| f.pixels.iter().copied()).collect();
                    let path = dir.join(&rel);
                    fs::write(&path, bytes).map_err(|e| LamaeError::io(&path, e))?;
                    views.push(ViewEntry::Blob {
                        blob: rel,
                        frames: view.len(),
                        width: view[0].width,
                        height: view[0].height,
                    });
                }
            }
        }
        write_line(&Record::Study(StudyRecord {
            study_id: s.id.clone(),
            split: s.split,
            views,
            labels: s.labels.clone(),
            codes: None,
            target: s.target,
            factors: s.factors.clone(),
        }))?;
    }
    out.flush().map_err(|e| LamaeError::io(&manifest, e))?;
    Ok(manifest)
}
