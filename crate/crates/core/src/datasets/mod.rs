//! Case records, ODIR-style manifests, stratified splitting, minority
//! oversampling and the synthetic fundus generator.

pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{io as imgio, Image, PreprocessError};

pub const NUM_CLASSES: usize = 8;

/// Manifest header, byte for byte.
pub const MANIFEST_HEADER: &str = "case_id,eye,filename,N,D,G,C,A,H,M,O";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Disease {
    Normal,
    Diabetes,
    Glaucoma,
    Cataract,
    Amd,
    Hypertension,
    Myopia,
    Other,
}

impl Disease {
    pub const ALL: [Disease; NUM_CLASSES] = [
        Disease::Normal,
        Disease::Diabetes,
        Disease::Glaucoma,
        Disease::Cataract,
        Disease::Amd,
        Disease::Hypertension,
        Disease::Myopia,
        Disease::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> char {
        ['N', 'D', 'G', 'C', 'A', 'H', 'M', 'O'][self.index()]
    }

    pub fn name(self) -> &'static str {
        [
            "Normal",
            "Diabetes",
            "Glaucoma",
            "Cataract",
            "AMD",
            "Hypertension",
            "Myopia",
            "Other",
        ][self.index()]
    }

    pub fn parse(s: &str) -> Option<Disease> {
        let s = s.trim().to_ascii_lowercase();
        Disease::ALL.into_iter().find(|d| {
            d.name().to_ascii_lowercase() == s || d.code().to_ascii_lowercase().to_string() == s
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("no label set")]
    NoLabel,
    #[error("Normal is exclusive but {0} is also set")]
    NormalNotExclusive(&'static str),
    #[error("label values must be 0 or 1, got {0}")]
    NotBinary(i64),
    #[error("expected {NUM_CLASSES} label slots, got {0}")]
    Arity(usize),
}

/// Eight-slot multi-label target ordered N, D, G, C, A, H, M, O.
///
/// At least one slot is set, and Normal excludes every other slot.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector([bool; NUM_CLASSES]);

impl LabelVector {
    pub fn new(bits: [bool; NUM_CLASSES]) -> Result<Self, LabelError> {
        if !bits.iter().any(|&b| b) {
            return Err(LabelError::NoLabel);
        }
        if bits[0] {
            if let Some(i) = (1..NUM_CLASSES).find(|&i| bits[i]) {
                return Err(LabelError::NormalNotExclusive(Disease::ALL[i].name()));
            }
        }
        Ok(Self(bits))
    }

    pub fn from_ints(values: &[i64]) -> Result<Self, LabelError> {
        if values.len() != NUM_CLASSES {
            return Err(LabelError::Arity(values.len()));
        }
        let mut bits = [false; NUM_CLASSES];
        for (b, &v) in bits.iter_mut().zip(values) {
            *b = match v {
                0 => false,
                1 => true,
                other => return Err(LabelError::NotBinary(other)),
            };
        }
        Self::new(bits)
    }

    pub fn single(d: Disease) -> Self {
        let mut bits = [false; NUM_CLASSES];
        bits[d.index()] = true;
        Self(bits)
    }

    pub fn normal() -> Self {
        Self::single(Disease::Normal)
    }

    pub fn from_diseases(ds: &[Disease]) -> Result<Self, LabelError> {
        let mut bits = [false; NUM_CLASSES];
        ds.iter().for_each(|d| bits[d.index()] = true);
        Self::new(bits)
    }

    pub fn get(&self, d: Disease) -> bool {
        self.0[d.index()]
    }

    pub fn bits(&self) -> [bool; NUM_CLASSES] {
        self.0
    }

    /// First set slot; the stratification key.
    pub fn primary(&self) -> usize {
        self.0.iter().position(|&b| b).expect("label invariant")
    }

    pub fn to_f64(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn positives(&self) -> impl Iterator<Item = Disease> + '_ {
        Disease::ALL.into_iter().filter(|d| self.get(*d))
    }
}

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "LabelVector({s})")
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = LabelError;
    fn try_from(v: Vec<u8>) -> Result<Self, LabelError> {
        Self::from_ints(&v.iter().map(|&x| x as i64).collect::<Vec<_>>())
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(l: LabelVector) -> Vec<u8> {
        l.0.iter().map(|&b| b as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
    #[default]
    Unknown,
}

impl Eye {
    pub fn parse(s: &str) -> Option<Eye> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Some(Eye::Left),
            "right" | "r" => Some(Eye::Right),
            "unknown" | "" => Some(Eye::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "left",
            Eye::Right => "right",
            Eye::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Provenance {
    Manifest,
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Inline(Arc<Image>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Image, PreprocessError> {
        match self {
            ImageSource::File(p) => imgio::load_image(p),
            ImageSource::Inline(img) => Ok((**img).clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub eye: Eye,
    pub image: ImageSource,
    /// Ground-truth vessel mask, when one is known (synthetic cases).
    pub vessel_mask: Option<ImageSource>,
    pub labels: LabelVector,
    pub split: Split,
    pub provenance: Provenance,
    /// Set on records created by [`oversample_minority`].
    pub duplicate_of: Option<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest header must be `{MANIFEST_HEADER}`, found `{0}`")]
    Header(String),
    #[error("manifest row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("manifest row {row}: image file {path} not found")]
    MissingFile { row: usize, path: PathBuf },
    #[error("case {case_id}: {source}")]
    Label {
        case_id: String,
        #[source]
        source: LabelError,
    },
    #[error("duplicate case_id {0}")]
    Duplicate(String),
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] PreprocessError),
}

/// Collection of case records with cached per-class positive counts.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    records: Vec<CaseRecord>,
    counts: [usize; NUM_CLASSES],
}

impl Dataset {
    pub fn new(records: Vec<CaseRecord>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.case_id.as_str()) {
                return Err(DatasetError::Duplicate(r.case_id.clone()));
            }
        }
        let counts = Self::count(&records);
        Ok(Self { records, counts })
    }

    fn count(records: &[CaseRecord]) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in records {
            for (c, b) in counts.iter_mut().zip(r.labels.bits()) {
                *c += b as usize;
            }
        }
        counts
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CaseRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        self.counts
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.records.iter().find(|r| r.case_id == case_id)
    }
}

/// Reads an ODIR-style manifest whose `filename` column is resolved against
/// `image_dir`.
pub fn load_manifest(manifest: &Path, image_dir: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(manifest)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != MANIFEST_HEADER {
        return Err(DatasetError::Header(header.to_string()));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 + NUM_CLASSES {
            return Err(DatasetError::Row {
                row,
                reason: format!("expected {} columns, found {}", 3 + NUM_CLASSES, cols.len()),
            });
        }
        let case_id = cols[0].to_string();
        if case_id.is_empty() {
            return Err(DatasetError::Row {
                row,
                reason: "empty case_id".into(),
            });
        }
        let eye = Eye::parse(cols[1]).ok_or_else(|| DatasetError::Row {
            row,
            reason: format!("unknown eye `{}`", cols[1]),
        })?;
        let mut ints = Vec::with_capacity(NUM_CLASSES);
        for c in &cols[3..] {
            ints.push(c.parse::<i64>().map_err(|_| DatasetError::Row {
                row,
                reason: format!("label value `{c}` is not an integer"),
            })?);
        }
        let labels = LabelVector::from_ints(&ints).map_err(|source| DatasetError::Label {
            case_id: case_id.clone(),
            source,
        })?;
        let path = image_dir.join(cols[2]);
        if !path.is_file() {
            return Err(DatasetError::MissingFile { row, path });
        }
        if !seen.insert(case_id.clone()) {
            return Err(DatasetError::Duplicate(case_id));
        }
        records.push(CaseRecord {
            case_id,
            eye,
            image: ImageSource::File(path),
            vessel_mask: None,
            labels,
            split: Split::Unassigned,
            provenance: Provenance::Manifest,
            duplicate_of: None,
        });
    }
    Dataset::new(records)
}

/// Writes the manifest for `records`, using `filename(record)` for the
/// filename column.
pub fn write_manifest(
    path: &Path,
    records: &[CaseRecord],
    filename: impl Fn(&CaseRecord) -> String,
) -> std::io::Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}", r.case_id, r.eye.as_str(), filename(r)));
        for b in r.labels.bits() {
            out.push_str(if b { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Attaches `mask_dir/<image file name>` as the vessel mask of every record
/// for which such a file exists.
pub fn attach_masks(ds: Dataset, mask_dir: &Path) -> Dataset {
    let records = ds
        .into_records()
        .into_iter()
        .map(|mut r| {
            if let ImageSource::File(p) = &r.image {
                if let Some(name) = p.file_name() {
                    let m = mask_dir.join(name);
                    if m.is_file() {
                        r.vessel_mask = Some(ImageSource::File(m));
                    }
                }
            }
            r
        })
        .collect();
    Dataset::new(records).expect("ids unchanged")
}

/// Stratified train/validation split keyed on each record's first positive
/// label. Classes with fewer than two members are assigned at random.
///
/// The validation set receives `round(n * val_fraction)` records overall;
/// per-class quotas use largest-remainder apportionment, so each class is
/// within one record of its exact share.
pub fn split(
    ds: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::Fraction(val_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, r) in ds.records.iter().enumerate() {
        groups[r.labels.primary()].push(i);
    }
    let mut to_val = vec![false; ds.len()];
    let mut strat: Vec<(usize, usize, f64)> = Vec::new(); // class, floor quota, remainder
    for (c, g) in groups.iter().enumerate() {
        match g.len() {
            0 => {}
            1 => {
                tracing::warn!(
                    class = Disease::ALL[c].name(),
                    "class has a single member; assigning it at random"
                );
                to_val[g[0]] = rng.random::<f64>() < val_fraction;
            }
            n => {
                let exact = n as f64 * val_fraction;
                strat.push((c, exact.floor() as usize, exact - exact.floor()));
            }
        }
    }
    let strat_total: usize = strat.iter().map(|&(c, _, _)| groups[c].len()).sum();
    let target = (strat_total as f64 * val_fraction).round() as usize;
    let floor_sum: usize = strat.iter().map(|s| s.1).sum();
    let mut order: Vec<usize> = (0..strat.len()).collect();
    order.sort_by(|&a, &b| strat[b].2.total_cmp(&strat[a].2).then(a.cmp(&b)));
    let mut quota: Vec<usize> = strat.iter().map(|s| s.1).collect();
    for &k in order.iter().take(target.saturating_sub(floor_sum)) {
        quota[k] += 1;
    }
    for (k, &(c, _, _)) in strat.iter().enumerate() {
        let mut members = groups[c].clone();
        members.shuffle(&mut rng);
        for &i in members.iter().take(quota[k]) {
            to_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in ds.records.iter().zip(to_val) {
        let mut r = r.clone();
        if v {
            r.split = Split::Val;
            val.push(r);
        } else {
            r.split = Split::Train;
            train.push(r);
        }
    }
    Ok((Dataset::new(train)?, Dataset::new(val)?))
}

/// Duplicates randomly chosen positives of under-represented classes until
/// every class with at least one positive reaches `target` positives.
/// Original records are kept in place; duplicates are appended with ids
/// `<original>#dup<k>` and `duplicate_of` set.
pub fn oversample_minority(ds: &Dataset, target: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let originals = ds.records.clone();
    let mut out = originals.clone();
    let mut counts = ds.counts;
    let mut dup_count = std::collections::HashMap::<String, usize>::new();
    for c in 0..NUM_CLASSES {
        if counts[c] == 0 || counts[c] >= target {
            continue;
        }
        let pool: Vec<&CaseRecord> = originals.iter().filter(|r| r.labels.bits()[c]).collect();
        while counts[c] < target {
            let src = pool[rng.random_range(0..pool.len())];
            let k = dup_count.entry(src.case_id.clone()).or_insert(0);
            *k += 1;
            let mut d = src.clone();
            d.case_id = format!("{}#dup{}", src.case_id, k);
            d.duplicate_of = Some(src.case_id.clone());
            for (cnt, b) in counts.iter_mut().zip(d.labels.bits()) {
                *cnt += b as usize;
            }
            out.push(d);
        }
    }
    Dataset::new(out).expect("duplicate ids are unique by construction")
}
