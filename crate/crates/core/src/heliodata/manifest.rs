use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Datelike, Utc};

use super::catalog::{csv_error, format_timestamp, parse_timestamp, Catalog, Label};
use super::class::{class_to_flux_lower_bound, FlareClass};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 7] =
    ["timestamp", "image_path", "label", "window_max_class", "window_max_flux", "hg_lon_deg", "partition"];

pub const NUM_PARTITIONS: usize = 4;

/// Tri-monthly partition of a timestamp: Jan-Mar 1, Apr-Jun 2, Jul-Sep 3, Oct-Dec 4.
pub fn assign_partition(timestamp: &DateTime<Utc>) -> u8 {
    (timestamp.month0() / 3 + 1) as u8
}

/// One labeled magnetogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnetogramSample {
    pub timestamp: DateTime<Utc>,
    pub image_path: String,
    pub label: Label,
    pub window_max_class: FlareClass,
    /// Peak flux of the strongest event in the window.
    pub window_max_flux: Option<f64>,
    /// Longitude of that event, used for central/near-limb stratification.
    pub hg_lon_deg: Option<f64>,
    pub partition: u8,
}

impl MagnetogramSample {
    fn validate(&self) -> Result<()> {
        let flare = class_to_flux_lower_bound(&self.window_max_class) >= super::FLARE_FLUX_THRESHOLD;
        if flare != (self.label == Label::FL) {
            return Err(Error::Format(format!(
                "label {} inconsistent with window max class {}",
                self.label, self.window_max_class
            )));
        }
        if self.partition != assign_partition(&self.timestamp) {
            return Err(Error::Format(format!(
                "partition {} does not match timestamp {}",
                self.partition,
                format_timestamp(&self.timestamp)
            )));
        }
        Ok(())
    }
}

/// Ordered samples plus free-text provenance lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<MagnetogramSample>,
    /// Rendered as leading `# ` lines.
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<MagnetogramSample>, notes: Vec<String>) -> Result<Self> {
        let m = DatasetManifest { samples, notes };
        m.validate()?;
        Ok(m)
    }

    /// Labels every timestamp against the catalog. `image_for` names the
    /// image file for each timestamp.
    pub fn label_timestamps(
        timestamps: &[DateTime<Utc>],
        catalog: &Catalog,
        window_hours: u32,
        image_for: impl Fn(&DateTime<Utc>) -> String,
    ) -> Result<Self> {
        let mut sorted = timestamps.to_vec();
        sorted.sort();
        let samples = sorted
            .iter()
            .map(|t| {
                let w = super::label_sample(*t, catalog, window_hours);
                MagnetogramSample {
                    timestamp: *t,
                    image_path: image_for(t),
                    label: w.label,
                    window_max_class: w.window_max_class,
                    window_max_flux: w.window_max_event.as_ref().map(|e| e.peak_flux),
                    hg_lon_deg: w.window_max_event.as_ref().map(|e| e.hg_longitude),
                    partition: assign_partition(t),
                }
            })
            .collect();
        Self::new(samples, vec![format!("window_hours={window_hours}")])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            s.validate().map_err(|e| Error::Format(format!("manifest row {}: {e}", i + 1)))?;
            if !seen.insert(s.timestamp) {
                return Err(Error::Format(format!("duplicate timestamp {}", format_timestamp(&s.timestamp))));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        let opt = |v: Option<f64>, exp: bool| match v {
            None => String::new(),
            Some(v) if exp => format!("{v:e}"),
            Some(v) => v.to_string(),
        };
        for s in &self.samples {
            w.write_record([
                format_timestamp(&s.timestamp),
                s.image_path.clone(),
                s.label.to_string(),
                s.window_max_class.to_string(),
                opt(s.window_max_flux, true),
                opt(s.hg_lon_deg, false),
                s.partition.to_string(),
            ])
            .expect("in-memory write");
        }
        out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf-8 fields"));
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut notes = Vec::new();
        let mut body = text;
        while let Some(rest) = body.strip_prefix('#') {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            notes.push(line.strip_prefix(' ').unwrap_or(line).trim_end_matches('\r').to_owned());
            body = tail;
        }
        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = reader.headers().map_err(csv_error)?;
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Format(format!("manifest header must be {:?}", MANIFEST_HEADER.join(","))));
        }
        let mut samples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(csv_error)?;
            let at = |e: Error| Error::Format(format!("manifest row {}: {e}", row + 1));
            let opt = |i: usize| -> Result<Option<f64>> {
                match &record[i] {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| Error::Format(format!("{} {s:?} is not a number", MANIFEST_HEADER[i]))),
                }
            };
            samples.push(MagnetogramSample {
                timestamp: parse_timestamp(&record[0]).map_err(at)?,
                image_path: record[1].to_owned(),
                label: record[2].parse().map_err(at)?,
                window_max_class: record[3].parse().map_err(at)?,
                window_max_flux: opt(4).map_err(at)?,
                hg_lon_deg: opt(5).map_err(at)?,
                partition: record[6]
                    .parse()
                    .ok()
                    .filter(|p| (1..=4).contains(p))
                    .ok_or_else(|| at(Error::Format(format!("partition {:?} not in 1..=4", &record[6]))))?,
            });
        }
        Self::new(samples, notes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Resolves `image_path` against `base` unless it is already absolute.
    pub fn image_path(&self, index: usize, base: &Path) -> std::path::PathBuf {
        base.join(&self.samples[index].image_path)
    }
}

/// Train/test split of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub test_partition: u8,
    /// Manifest indices of the three training partitions.
    pub train: Vec<usize>,
    /// Manifest indices of the held-out partition.
    pub test: Vec<usize>,
}

impl Fold {
    pub fn train_partitions(&self) -> Vec<u8> {
        (1..=4).filter(|p| *p != self.test_partition).collect()
    }
}

/// Four folds; fold `k` tests on partition `k` and trains on the others.
pub fn make_folds(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let mut by_partition: [Vec<usize>; NUM_PARTITIONS] = Default::default();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_partition[usize::from(s.partition - 1)].push(i);
    }
    if let Some(p) = by_partition.iter().position(Vec::is_empty) {
        return Err(Error::Fold(format!("partition {} is empty", p + 1)));
    }
    Ok((0..NUM_PARTITIONS)
        .map(|k| {
            let mut train: Vec<usize> = (0..NUM_PARTITIONS).filter(|&p| p != k).flat_map(|p| by_partition[p].clone()).collect();
            train.sort_unstable();
            Fold { test_partition: k as u8 + 1, train, test: by_partition[k].clone() }
        })
        .collect())
}

/// FL/NF counts per partition, as in the dataset overview table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartitionSummary {
    pub nf: [usize; NUM_PARTITIONS],
    pub fl: [usize; NUM_PARTITIONS],
}

impl PartitionSummary {
    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        let mut s = PartitionSummary::default();
        for m in &manifest.samples {
            let p = usize::from(m.partition - 1);
            match m.label {
                Label::FL => s.fl[p] += 1,
                Label::NF => s.nf[p] += 1,
            }
        }
        s
    }

    pub fn total_nf(&self) -> usize {
        self.nf.iter().sum()
    }

    pub fn total_fl(&self) -> usize {
        self.fl.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.total_nf() + self.total_fl()
    }

    /// Aligned text table with per-partition and total columns.
    pub fn render(&self) -> String {
        let cols: Vec<(usize, usize)> = (0..NUM_PARTITIONS)
            .map(|p| (self.nf[p], self.fl[p]))
            .chain(std::iter::once((self.total_nf(), self.total_fl())))
            .collect();
        let mut header = vec!["Binary Class".to_owned()];
        header.extend((1..=NUM_PARTITIONS).map(|p| format!("Partition-{p}")));
        header.push("Total".to_owned());
        let rows = [
            ("NF (<M1.0)".to_owned(), cols.iter().map(|c| group_thousands(c.0)).collect::<Vec<_>>()),
            ("FL (>=M1.0)".to_owned(), cols.iter().map(|c| group_thousands(c.1)).collect()),
            ("FL:NF".to_owned(), cols.iter().map(|c| ratio_label(c.1, c.0)).collect()),
        ];
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for (name, cells) in &rows {
            widths[0] = widths[0].max(name.len());
            for (i, c) in cells.iter().enumerate() {
                widths[i + 1] = widths[i + 1].max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let mut parts = Vec::new();
            for (i, c) in cells.iter().enumerate() {
                parts.push(if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) });
            }
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(header.iter().map(String::as_str).collect(), &mut out);
        for (name, cells) in &rows {
            let mut v = vec![name.as_str()];
            v.extend(cells.iter().map(String::as_str));
            line(v, &mut out);
        }
        out
    }
}

/// `~1:k` with `k = round(nf / fl)`; `-` when there are no flares.
pub fn ratio_label(fl: usize, nf: usize) -> String {
    if fl == 0 {
        return "-".to_owned();
    }
    format!("~1:{}", (nf as f64 / fl as f64).round())
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
