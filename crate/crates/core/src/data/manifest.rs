//! Dataset manifest CSV:
//! `split,image,mask_ma,mask_hem,mask_ex,mask_se,mask_od,od_cx,od_cy`.
//!
//! Paths are relative to the manifest's directory. Empty mask fields mean the class
//! is absent from the image. `od_cx`/`od_cy` are optic-disk centre coordinates in
//! original-resolution pixels and are either both present or both empty.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::NUM_SCORED;

pub const HEADER: [&str; 9] =
    ["split", "image", "mask_ma", "mask_hem", "mask_ex", "mask_se", "mask_od", "od_cx", "od_cy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub split: Split,
    /// Absolute (resolved) image path.
    pub image: PathBuf,
    pub masks: [Option<PathBuf>; NUM_SCORED],
    pub od_center: Option<(f64, f64)>,
}

impl Record {
    /// Image file stem, used to name outputs.
    pub fn name(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let load_err = |row: usize, msg: String| Error::Load { path: path.to_path_buf(), row, msg };

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let header = rdr.headers().map_err(|e| load_err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(load_err(1, format!("bad header, expected {}", HEADER.join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| load_err(row_no, e.to_string()))?;
        if row.len() != HEADER.len() {
            return Err(load_err(row_no, format!("{} fields, expected {}", row.len(), HEADER.len())));
        }
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let split = field(0).parse::<Split>().map_err(|m| load_err(row_no, m))?;
        let resolve = |rel: &str| -> Result<PathBuf> {
            let p = base_dir.join(rel);
            if !p.is_file() {
                return Err(load_err(row_no, format!("missing file {}", p.display())));
            }
            Ok(p)
        };
        if field(1).is_empty() {
            return Err(load_err(row_no, "image path is empty".into()));
        }
        let image = resolve(field(1))?;
        let mut masks: [Option<PathBuf>; NUM_SCORED] = Default::default();
        for (k, slot) in masks.iter_mut().enumerate() {
            let f = field(2 + k);
            if !f.is_empty() {
                *slot = Some(resolve(f)?);
            }
        }
        let coord = |k: usize| -> Result<Option<f64>> {
            let f = field(k);
            if f.is_empty() {
                return Ok(None);
            }
            let v = f.parse::<f64>().map_err(|_| load_err(row_no, format!("{} is not a number: {f:?}", HEADER[k])))?;
            if !v.is_finite() {
                return Err(load_err(row_no, format!("{} is not finite", HEADER[k])));
            }
            Ok(Some(v))
        };
        let od_center = match (coord(7)?, coord(8)?) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => return Err(load_err(row_no, "od_cx and od_cy must both be present or both empty".into())),
        };
        records.push(Record { split, image, masks, od_center });
    }
    Ok(DatasetManifest { base_dir, records })
}

/// Write a manifest; paths are stored relative to `path`'s directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> String {
        let s = p.strip_prefix(dir).unwrap_or(p);
        s.to_string_lossy().replace('\\', "/")
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(HEADER).map_err(csv_err)?;
    for r in &manifest.records {
        let mut fields = vec![r.split.to_string(), rel(&r.image)];
        fields.extend(r.masks.iter().map(|m| m.as_deref().map(rel).unwrap_or_default()));
        match r.od_center {
            Some((x, y)) => fields.extend([x.to_string(), y.to_string()]),
            None => fields.extend([String::new(), String::new()]),
        }
        w.write_record(&fields).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
