//! Which objects switch on each symbol code and which relative displacements
//! switch on each relation head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{ordered_batches, SampleRecord};
use crate::gradcore::Graph;
use crate::models::{forward, ModelCheckpoint, ModelError, Mode, NoNoise};
use crate::simenv::BlockKind;

pub const SCHEMA_VERSION: u32 = 1;
const BATCH: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::datasets::DataError),
    #[error("{0}")]
    Unsupported(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// One object instance: kind and pose relative to the grasped object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolRow {
    pub kind: BlockKind,
    pub pos: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymbolActivationReport {
    /// Keyed by the code written as bits, e.g. `"0101"`.
    pub codes: BTreeMap<String, Vec<SymbolRow>>,
    pub total: usize,
}

impl SymbolActivationReport {
    pub fn count(&self, code: &str) -> usize {
        self.codes.get(code).map_or(0, Vec::len)
    }

    /// Share of the majority block kind among a code's activations.
    pub fn kind_purity(&self, code: &str) -> Option<(BlockKind, f64)> {
        let rows = self.codes.get(code).filter(|r| !r.is_empty())?;
        let short = rows.iter().filter(|r| r.kind == BlockKind::Short).count();
        let long = rows.len() - short;
        let (kind, n) = if short >= long {
            (BlockKind::Short, short)
        } else {
            (BlockKind::Long, long)
        };
        Some((kind, n as f64 / rows.len() as f64))
    }

    /// The purest code among those with at least `min_count` activations.
    pub fn purest_code(&self, min_count: usize) -> Option<(String, BlockKind, f64)> {
        self.codes
            .keys()
            .filter(|c| self.count(c) >= min_count.max(1))
            .filter_map(|c| self.kind_purity(c).map(|(k, p)| (c.clone(), k, p)))
            .max_by(|a, b| a.2.total_cmp(&b.2).then(b.0.cmp(&a.0)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationActivationReport {
    /// Per head, `p_l - p_i` for every ordered pair `(i, l)`, `i != l`,
    /// whose relation bit is set.
    pub heads: Vec<Vec<[f64; 3]>>,
    /// Ordered pairs scanned.
    pub pairs: usize,
    /// `dy` over every scanned pair, for comparison with per-head spreads.
    pub population_dy_std: f64,
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

impl RelationActivationReport {
    /// Standard deviation of `dy` over each head's activations (`None`
    /// for a head that never fires).
    pub fn dy_spread(&self) -> Vec<Option<f64>> {
        self.heads
            .iter()
            .map(|h| (!h.is_empty()).then(|| std_dev(h.iter().map(|d| d[1]))))
            .collect()
    }
}

fn kind_of(row: &[f64]) -> BlockKind {
    if row[1] > row[0] {
        BlockKind::Long
    } else {
        BlockKind::Short
    }
}

fn code_string(bits: &[f64]) -> String {
    bits.iter().map(|&b| if b > 0.5 { '1' } else { '0' }).collect()
}

/// Runs the encoder over every object of every record in hard mode and
/// buckets objects by their exact code.
pub fn symbol_report(ckpt: &ModelCheckpoint, records: &[SampleRecord]) -> Result<SymbolActivationReport, InterpretError> {
    let mut report = SymbolActivationReport::default();
    let d_z = ckpt.config.d_z;
    for b in ordered_batches(records, BATCH)? {
        let mut g = Graph::inference();
        let out = forward(&mut g, ckpt, &b, Mode::Hard, &mut NoNoise)?;
        let z = out.symbols.ok_or_else(|| {
            InterpretError::Unsupported(format!("{} models have no per-object symbols", ckpt.config.arch))
        })?;
        let z = g.value(z);
        for s in 0..b.size {
            for i in 0..b.counts[s] {
                let r = s * b.n_pad + i;
                let f = b.feature_row(s, i);
                report
                    .codes
                    .entry(code_string(&z[r * d_z..(r + 1) * d_z]))
                    .or_default()
                    .push(SymbolRow {
                        kind: kind_of(f),
                        pos: [f[2], f[3], f[4]],
                    });
                report.total += 1;
            }
        }
    }
    Ok(report)
}

/// Records the displacement for every ordered object pair with a set
/// relation bit, per head, in hard mode.
pub fn relation_report(ckpt: &ModelCheckpoint, records: &[SampleRecord]) -> Result<RelationActivationReport, InterpretError> {
    let mut report = RelationActivationReport {
        heads: vec![Vec::new(); ckpt.config.heads],
        ..Default::default()
    };
    let mut all_dy = Vec::new();
    for b in ordered_batches(records, BATCH)? {
        let mut g = Graph::inference();
        let out = forward(&mut g, ckpt, &b, Mode::Hard, &mut NoNoise)?;
        if out.relations.is_empty() {
            return Err(InterpretError::Unsupported(format!(
                "{} models have no relation heads",
                ckpt.config.arch
            )));
        }
        let n = b.n_pad;
        for s in 0..b.size {
            for i in 0..b.counts[s] {
                for l in (0..b.counts[s]).filter(|&l| l != i) {
                    let (fi, fl) = (b.feature_row(s, i), b.feature_row(s, l));
                    let d = [fl[2] - fi[2], fl[3] - fi[3], fl[4] - fi[4]];
                    all_dy.push(d[1]);
                    report.pairs += 1;
                    for (h, a) in out.relations.iter().enumerate() {
                        if g.value(*a)[s * n * n + i * n + l] > 0.5 {
                            report.heads[h].push(d);
                        }
                    }
                }
            }
        }
    }
    report.population_dy_std = std_dev(all_dy.iter().copied());
    Ok(report)
}

pub fn symbols_csv(report: &SymbolActivationReport) -> String {
    let mut out = String::from("code,kind,x,y,z\n");
    for (code, rows) in &report.codes {
        for r in rows {
            let _ = writeln!(out, "{code},{},{},{},{}", r.kind.as_str(), r.pos[0], r.pos[1], r.pos[2]);
        }
    }
    out
}

pub fn relations_csv(report: &RelationActivationReport) -> String {
    let mut out = String::from("head,dx,dy,dz\n");
    for (h, rows) in report.heads.iter().enumerate() {
        for d in rows {
            let _ = writeln!(out, "{h},{},{},{}", d[0], d[1], d[2]);
        }
    }
    out
}

#[derive(Serialize)]
struct Schema<'a> {
    schema_version: u32,
    files: BTreeMap<&'a str, &'a str>,
}

/// Writes `symbols.csv`, `relations.csv` (when given) and `schema.json`.
pub fn write_reports(
    dir: &Path,
    symbols: &SymbolActivationReport,
    relations: Option<&RelationActivationReport>,
) -> Result<(), InterpretError> {
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| InterpretError::Io { path, source })
    };
    fs::create_dir_all(dir).map_err(|source| InterpretError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = BTreeMap::new();
    write("symbols.csv", &symbols_csv(symbols))?;
    files.insert("symbols.csv", "code,kind,x,y,z");
    if let Some(r) = relations {
        write("relations.csv", &relations_csv(r))?;
        files.insert("relations.csv", "head,dx,dy,dz");
    }
    let schema = serde_json::to_string_pretty(&Schema {
        schema_version: SCHEMA_VERSION,
        files,
    })
    .expect("schema serialises");
    write("schema.json", &(schema + "\n"))
}
