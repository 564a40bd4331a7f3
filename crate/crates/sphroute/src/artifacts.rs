//! On-disk records written by a run: dataset manifest, loss log, route
//! traces and metric reports.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sphroute_core::metrics::{BiasReport, PurityReport};
use sphroute_core::router::hard_route;
use sphroute_core::synth::{Dataset, Family, ImageSample, Split, SynthParams};
use sphroute_core::Tensor;

use crate::error::{format_err, io_err, Error, Result};

pub const MANIFEST_SCHEMA: &str = "sphroute.manifest/1";
pub const LOSSES_SCHEMA: &str = "# schema: sphroute.losses/1";
pub const ROUTE_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA: &str = "sphroute.metrics/1";

/// SHA-256 over the shape (u64 LE per axis) followed by each value's bits (LE).
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("records serialise");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Family,
    pub params: SynthParams,
    pub clean_sha256: String,
    pub degraded_sha256: String,
}

impl ManifestEntry {
    pub fn of(s: &ImageSample) -> Self {
        Self {
            id: s.id.clone(),
            split: s.split,
            label: s.label,
            params: s.params,
            clean_sha256: tensor_hash(&s.clean),
            degraded_sha256: tensor_hash(&s.degraded),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    /// Hex SHA-256 of the synthesis section of the run configuration.
    pub synth_hash: String,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of(ds: &Dataset, synth_hash: String) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            synth_hash,
            samples: ds.train.iter().chain(&ds.test).map(ManifestEntry::of).collect(),
        }
    }

    /// Fails on the first sample whose content differs from the manifest.
    pub fn verify(&self, ds: &Dataset) -> Result<()> {
        let all: Vec<&ImageSample> = ds.train.iter().chain(&ds.test).collect();
        if all.len() != self.samples.len() {
            let id = all.get(self.samples.len()).map_or("<end>".into(), |s| s.id.clone());
            return Err(Error::ManifestMismatch { id });
        }
        for (s, e) in all.into_iter().zip(&self.samples) {
            if ManifestEntry::of(s) != *e {
                return Err(Error::ManifestMismatch { id: s.id.clone() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: u8,
    pub step: u64,
    pub l1: f64,
    pub hc: f64,
    pub total: f64,
    pub lr: f64,
}

/// Appends rows to `losses.csv`. The first line of the file names the schema;
/// the second is the column header.
pub struct LossLog {
    out: csv::Writer<BufWriter<File>>,
}

impl LossLog {
    /// Rewrites `path` with the schema line, the header and `keep`.
    pub fn create(path: &Path, keep: &[LossRow]) -> Result<Self> {
        let mut f = File::create(path).map_err(io_err(path))?;
        writeln!(f, "{LOSSES_SCHEMA}").map_err(io_err(path))?;
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f));
        out.write_record(["stage", "step", "l1", "hc", "total", "lr"]).map_err(|e| format_err(path, e))?;
        for r in keep {
            out.serialize(r).map_err(|e| format_err(path, e))?;
        }
        out.flush().map_err(io_err(path))?;
        Ok(Self { out })
    }

    /// Opens an existing log for appending.
    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        let out = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f));
        Ok(Self { out })
    }

    pub fn push(&mut self, row: &LossRow) -> Result<()> {
        self.out.serialize(row).map_err(|e| format_err("losses.csv", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(io_err("losses.csv"))
    }
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRow>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f);
    let mut first = String::new();
    lines.read_line(&mut first).map_err(io_err(path))?;
    if first.trim_end() != LOSSES_SCHEMA {
        return Err(format_err(path, format!("unexpected schema line {:?}", first.trim_end())));
    }
    let mut rd = csv::Reader::from_reader(lines);
    rd.deserialize().map(|r| r.map_err(|e| format_err(path, e))).collect()
}

/// One sample's routing decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub schema_version: u32,
    pub id: String,
    pub label: Family,
    /// Expert index per site.
    pub y: Vec<usize>,
    /// Gate probabilities per site.
    pub p: Vec<Vec<f64>>,
}

impl RouteTrace {
    /// `y` must be the row-wise argmax of `p`, lowest index on ties.
    pub fn is_consistent(&self) -> bool {
        let c = self.p.first().map_or(0, Vec::len);
        if self.y.len() != self.p.len() || self.p.iter().any(|r| r.len() != c) {
            return false;
        }
        let flat: Vec<f64> = self.p.concat();
        match Tensor::new(&[self.p.len(), c], flat) {
            Ok(t) => hard_route(&t) == self.y,
            Err(_) => false,
        }
    }
}

pub fn write_traces(path: &Path, traces: &[RouteTrace]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for t in traces {
        serde_json::to_writer(&mut w, t).expect("traces serialise");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_traces(path: &Path) -> Result<Vec<RouteTrace>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t: RouteTrace = serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        if t.schema_version != ROUTE_SCHEMA_VERSION {
            return Err(format_err(path, format!("line {}: schema version {}", i + 1, t.schema_version)));
        }
        if !t.is_consistent() {
            return Err(format_err(path, format!("line {}: y is not the argmax of p", i + 1)));
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub family: Family,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the degraded input against the clean image.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: String,
    pub config_hash: String,
    pub sample_count: usize,
    pub families: Vec<FamilyMetrics>,
    /// Mean of the per-family entries.
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn new(config_hash: String, families: Vec<FamilyMetrics>) -> Self {
        let n = families.len().max(1) as f64;
        Self {
            schema: REPORT_SCHEMA.into(),
            config_hash,
            sample_count: families.iter().map(|f| f.count).sum(),
            psnr: families.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: families.iter().map(|f| f.ssim).sum::<f64>() / n,
            families,
        }
    }

    pub fn family(&self, f: Family) -> Option<&FamilyMetrics> {
        self.families.iter().find(|m| m.family == f)
    }
}

pub type Purity = PurityReport<Family>;

/// Dispersion of class centroids, per routing site and averaged over sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostic {
    /// Unit-projected routing rows.
    pub angular: Vec<BiasReport>,
    /// Routing rows before projection.
    pub linear: Vec<BiasReport>,
    pub mean_angular_ratio: f64,
    pub mean_linear_ratio: f64,
}
