use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Label, Magnification, Split};
use crate::error::{data_err, Error, Result};
use crate::hash::sha256_hex;
use crate::preprocess::decode_image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub label: Label,
    pub magnification: Magnification,
    pub patient_id: String,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub label: Label,
    pub magnification: Magnification,
    pub split: Option<Split>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub root: PathBuf,
    pub fingerprint: String,
    pub records: usize,
    pub counts: Vec<StratumCount>,
    /// Files skipped during scanning and why.
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    /// Hash over every record's identity and file contents.
    pub fingerprint: String,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn counts(&self) -> Vec<StratumCount> {
        let mut map: BTreeMap<(Label, Magnification, Option<Split>), usize> = BTreeMap::new();
        for r in &self.records {
            *map.entry((r.label, r.magnification, r.split)).or_default() += 1;
        }
        map.into_iter()
            .map(|((label, magnification, split), count)| StratumCount {
                label,
                magnification,
                split,
                count,
            })
            .collect()
    }

    pub fn header(&self) -> ManifestHeader {
        ManifestHeader {
            root: self.root.clone(),
            fingerprint: self.fingerprint.clone(),
            records: self.records.len(),
            counts: self.counts(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn absolute(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.path)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Ok(name) = entry.file_name().into_string() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Walks `root/{benign,malignant}/{40X,100X,200X,400X}/<patient>/<file>`.
/// Missing class or magnification folders contribute nothing; files that
/// fail to decode are reported in `warnings` and skipped.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut digest = String::new();
    for label in Label::ALL {
        for mag in Magnification::ALL {
            let dir = root.join(label.as_str()).join(mag.as_str());
            if !dir.is_dir() {
                continue;
            }
            for (patient, pdir) in sorted_entries(&dir)? {
                if !pdir.is_dir() {
                    continue;
                }
                for (file, fpath) in sorted_entries(&pdir)? {
                    if !fpath.is_file() {
                        continue;
                    }
                    let rel = format!("{label}/{mag}/{patient}/{file}");
                    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
                    if let Err(e) = decode_image(&bytes) {
                        warnings.push(format!("{rel}: {e}"));
                        continue;
                    }
                    records.push((
                        SampleRecord {
                            path: rel,
                            label,
                            magnification: mag,
                            patient_id: patient.clone(),
                            split: None,
                        },
                        sha256_hex(&bytes),
                    ));
                }
            }
        }
    }
    records.sort_by(|a, b| a.0.path.cmp(&b.0.path));
    for (r, h) in &records {
        digest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{h}\n",
            r.path,
            r.label.index(),
            r.magnification,
            r.patient_id
        ));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        records: records.into_iter().map(|(r, _)| r).collect(),
        fingerprint: sha256_hex(digest.as_bytes()),
        warnings,
    })
}

const COLUMNS: [&str; 5] = ["path", "label", "magnification", "patient_id", "split"];

/// CSV with a leading `# {json header}` line.
pub fn write_manifest(path: impl AsRef<Path>, m: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!(
        "# {}\n",
        serde_json::to_string(&m.header()).expect("header serializes")
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let csv_err = |e: csv::Error| Error::Data(format!("manifest csv: {e}"));
        w.write_record(COLUMNS).map_err(csv_err)?;
        for r in &m.records {
            let label = r.label.index().to_string();
            let split = r.split.map_or("", |s| s.as_str());
            w.write_record([
                r.path.as_str(),
                &label,
                r.magnification.as_str(),
                &r.patient_id,
                split,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let Some(json) = first.strip_prefix("# ") else {
        return data_err("manifest must start with a '# {json}' header line");
    };
    let header: ManifestHeader =
        serde_json::from_str(json).map_err(|e| Error::Data(format!("manifest header: {e}")))?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let cols = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest csv: {e}")))?;
    if cols.iter().ne(COLUMNS) {
        return data_err(format!("manifest columns must be {}", COLUMNS.join(",")));
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("manifest csv: {e}")))?;
        let label = row[1]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_index)
            .ok_or_else(|| {
                Error::Data(format!("non-binary label {:?} for {}", &row[1], &row[0]))
            })?;
        let magnification = row[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad magnification {:?}", &row[2])))?;
        let split = match &row[4] {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::Data(format!("bad split {s:?}")))?,
            ),
        };
        if !seen.insert(row[0].to_string()) {
            return data_err(format!("path {} appears twice", &row[0]));
        }
        records.push(SampleRecord {
            path: row[0].to_string(),
            label,
            magnification,
            patient_id: row[3].to_string(),
            split,
        });
    }
    let m = Manifest {
        root: header.root.clone(),
        records,
        fingerprint: header.fingerprint.clone(),
        warnings: header.warnings.clone(),
    };
    if m.records.len() != header.records || m.counts() != header.counts {
        return data_err("manifest counts do not match its records");
    }
    Ok(m)
}
