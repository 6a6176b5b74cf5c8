//! Interaction datasets: generation through the simulator, the on-disk
//! record format, 80/10/10 splitting and padded batching.
//!
//! A dataset directory holds two files:
//!
//! * `samples.rdsd`: first line `RDSYM-DATA 1`, then one record per line as
//!   `<byte length> <json>`; the JSON object has the fields of
//!   [`SampleRecord`].
//! * `manifest.json`: a [`DatasetManifest`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::simenv::{self, ActionSpec, SimError, WorldState};

pub const DATA_FORMAT_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "samples.rdsd";
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER: &str = "RDSYM-DATA 1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("cannot split {0} records into non-empty 80/10/10 parts (need at least 10)")]
    TooFew(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2obj")]
    TwoObjects,
    #[serde(rename = "3obj")]
    ThreeObjects,
    #[serde(rename = "4obj")]
    FourObjects,
    #[serde(rename = "mixed")]
    Mixed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::TwoObjects,
        Variant::ThreeObjects,
        Variant::FourObjects,
        Variant::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TwoObjects => "2obj",
            Variant::ThreeObjects => "3obj",
            Variant::FourObjects => "4obj",
            Variant::Mixed => "mixed",
        }
    }

    /// Object count for the fixed-size variants.
    pub fn objects(self) -> Option<usize> {
        match self {
            Variant::TwoObjects => Some(2),
            Variant::ThreeObjects => Some(3),
            Variant::FourObjects => Some(4),
            Variant::Mixed => None,
        }
    }

    pub fn max_objects(self) -> usize {
        self.objects().unwrap_or(4)
    }

    /// Desk-scale sample count (a tenth of the full-scale collection).
    pub fn desk_count(self) -> usize {
        match self {
            Variant::TwoObjects => 12_000,
            Variant::ThreeObjects => 18_000,
            Variant::FourObjects => 24_000,
            Variant::Mixed => 54_000,
        }
    }

    pub fn full_count(self) -> usize {
        self.desk_count() * 10
    }
}

impl std::str::FromStr for Variant {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DataError::Argument(format!("unknown dataset variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One interaction. `scene` and `action_spec` keep the absolute scene so
/// that effects can be replayed through the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub n: usize,
    pub features: Vec<[f64; 6]>,
    pub action: [f64; 6],
    pub effects: Vec<[f64; 6]>,
    pub scene: WorldState,
    pub action_spec: ActionSpec,
}

impl SampleRecord {
    pub fn from_interaction(
        scene: &WorldState,
        action: &ActionSpec,
    ) -> Result<(Self, WorldState), DataError> {
        let (next, effects) = simenv::execute(scene, action)?;
        let record = SampleRecord {
            n: scene.blocks.len(),
            features: simenv::relative_features(scene, action),
            action: action.one_hot()?,
            effects: effects.per_object,
            scene: scene.clone(),
            action_spec: *action,
        };
        Ok((record, next))
    }

    pub fn grasped(&self) -> usize {
        self.action_spec.grasp_index
    }

    pub fn target(&self) -> usize {
        self.action_spec.target_index
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidRecord(m.to_string()));
        if self.features.len() != self.n || self.effects.len() != self.n {
            return bad("row count differs from n");
        }
        if self.scene.blocks.len() != self.n {
            return bad("scene size differs from n");
        }
        self.action_spec.validate(self.n)?;
        let grasp_bits = self.action[..3].iter().filter(|&&v| v == 1.0).count();
        let release_bits = self.action[3..].iter().filter(|&&v| v == 1.0).count();
        let zeros = self.action.iter().filter(|&&v| v == 0.0).count();
        if grasp_bits != 1 || release_bits != 1 || zeros != 4 {
            return bad("action must set exactly one grasp and one release bit");
        }
        let origin_rows = self
            .features
            .iter()
            .filter(|f| f[2] == 0.0 && f[3] == 0.0 && f[4] == 0.0)
            .count();
        if origin_rows != 1 {
            return bad("exactly one feature row must sit at the grasp origin");
        }
        if self.features.iter().filter(|f| f[5] == 1.0).count() != 1 {
            return bad("exactly one feature row must be the target");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 80/10/10 with validation and test rounded down.
    pub fn for_total(total: usize) -> Result<Self, DataError> {
        if total < 10 {
            return Err(DataError::TooFew(total));
        }
        let val = total / 10;
        let test = total / 10;
        Ok(Self {
            train: total - val - test,
            val,
            test,
        })
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub variant: Variant,
    pub total: usize,
    pub counts: SplitCounts,
    pub generation_seed: u64,
    pub split_seed: u64,
    pub simulator_version: String,
    pub records_file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `count` independent interactions with `n_objects` blocks. Sample `i`
/// draws from its own stream, so any shard can be regenerated alone.
pub fn generate_records(
    n_objects: usize,
    count: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<SampleRecord>, DataError> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, stream_base + i as u64);
            let scene = simenv::spawn_scene(n_objects, &mut rng)?;
            let action = ActionSpec::random(n_objects, &mut rng);
            SampleRecord::from_interaction(&scene, &action).map(|(r, _)| r)
        })
        .collect()
}

/// Per-object-count sample counts making up `total` for a variant. The mixed
/// variant splits in the 2:3:4 proportion of the fixed-size collections.
pub fn variant_parts(variant: Variant, total: usize) -> Vec<(usize, usize)> {
    match variant.objects() {
        Some(n) => vec![(n, total)],
        None => {
            let two = total * 2 / 9;
            let three = total * 3 / 9;
            vec![(2, two), (3, three), (4, total - two - three)]
        }
    }
}

pub fn generate_in_memory(variant: Variant, total: usize, seed: u64) -> Result<Dataset, DataError> {
    if total == 0 {
        return Err(DataError::Argument("total_count must be positive".into()));
    }
    let counts = SplitCounts::for_total(total)?;
    let mut records = Vec::with_capacity(total);
    for (n, count) in variant_parts(variant, total) {
        records.extend(generate_records(n, count, seed, (n as u64) << 40)?);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATA_FORMAT_VERSION,
            variant,
            total,
            counts,
            generation_seed: seed,
            split_seed: seed,
            simulator_version: simenv::SIMULATOR_VERSION.to_string(),
            records_file: RECORDS_FILE.to_string(),
        },
        records,
    })
}

/// Generates a dataset and writes it under `dir`.
pub fn generate(variant: Variant, total: usize, seed: u64, dir: &Path) -> Result<Dataset, DataError> {
    let ds = generate_in_memory(variant, total, seed)?;
    ds.save(dir)?;
    Ok(ds)
}

pub fn encode_record(record: &SampleRecord) -> String {
    let json = serde_json::to_string(record).expect("records serialize");
    format!("{} {}", json.len(), json)
}

pub fn decode_record(line: &str) -> Result<SampleRecord, String> {
    let (len, json) = line
        .split_once(' ')
        .ok_or_else(|| "missing length prefix".to_string())?;
    let len: usize = len.parse().map_err(|e| format!("bad length prefix: {e}"))?;
    if json.len() != len {
        return Err(format!("length prefix {len} but payload has {} bytes", json.len()));
    }
    serde_json::from_str(json).map_err(|e| e.to_string())
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RECORDS_FILE);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{HEADER}").map_err(io_err(&path))?;
        for r in &self.records {
            writeln!(w, "{}", encode_record(r)).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        // manifest last: its presence marks a complete dataset
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Format {
                path: mpath.clone(),
                line: 0,
                msg: e.to_string(),
            })?;
        if manifest.format_version != DATA_FORMAT_VERSION {
            return Err(DataError::Format {
                path: mpath,
                line: 0,
                msg: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let path = dir.join(&manifest.records_file);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::with_capacity(manifest.total);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            let fmt = |msg: String| DataError::Format {
                path: path.clone(),
                line: i + 1,
                msg,
            };
            if i == 0 {
                if line != HEADER {
                    return Err(fmt(format!("expected header {HEADER:?}")));
                }
                continue;
            }
            records.push(decode_record(&line).map_err(fmt)?);
        }
        if records.len() != manifest.total {
            return Err(DataError::Format {
                path,
                line: 0,
                msg: format!(
                    "manifest lists {} records, file holds {}",
                    manifest.total,
                    records.len()
                ),
            });
        }
        Ok(Self { manifest, records })
    }

    pub fn split(&self, seed: u64) -> Result<Splits, DataError> {
        split(&self.records, seed)
    }

    /// Split using the seed recorded in the manifest.
    pub fn splits(&self) -> Result<Splits, DataError> {
        self.split(self.manifest.split_seed)
    }
}

/// Deterministic shuffle into disjoint 80/10/10 parts.
pub fn split(records: &[SampleRecord], seed: u64) -> Result<Splits, DataError> {
    let counts = SplitCounts::for_total(records.len())?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut sample_rng(seed, u64::MAX));
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    let (train, rest) = order.split_at(counts.train);
    let (val, test) = rest.split_at(counts.val);
    Ok(Splits {
        train: pick(train),
        val: pick(val),
        test: pick(test),
    })
}

/// Records padded to the largest object count in the batch.
///
/// `features` and `effects` are `[size * n_pad, 6]` row-major, `actions` is
/// `[size, 6]`, and `mask` is 1 for real objects and 0 for padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_pad: usize,
    pub features: Vec<f64>,
    pub actions: Vec<f64>,
    pub effects: Vec<f64>,
    pub mask: Vec<f64>,
    pub counts: Vec<usize>,
    /// `(grasped, target)` object index per sample.
    pub roles: Vec<(usize, usize)>,
}

impl Batch {
    pub fn from_records<'a, I>(records: I) -> Self
    where
        I: IntoIterator<Item = &'a SampleRecord>,
    {
        let records: Vec<&SampleRecord> = records.into_iter().collect();
        let n_pad = records.iter().map(|r| r.n).max().unwrap_or(0);
        let size = records.len();
        let mut b = Batch {
            size,
            n_pad,
            features: vec![0.0; size * n_pad * 6],
            actions: Vec::with_capacity(size * 6),
            effects: vec![0.0; size * n_pad * 6],
            mask: vec![0.0; size * n_pad],
            counts: Vec::with_capacity(size),
            roles: Vec::with_capacity(size),
        };
        for (s, r) in records.iter().enumerate() {
            for i in 0..r.n {
                let row = (s * n_pad + i) * 6;
                b.features[row..row + 6].copy_from_slice(&r.features[i]);
                b.effects[row..row + 6].copy_from_slice(&r.effects[i]);
                b.mask[s * n_pad + i] = 1.0;
            }
            b.actions.extend_from_slice(&r.action);
            b.counts.push(r.n);
            b.roles.push((r.grasped(), r.target()));
        }
        b
    }

    /// A single unlabelled sample (effects zero), as used for prediction.
    pub fn single(features: &[[f64; 6]], action: [f64; 6], roles: (usize, usize)) -> Self {
        let n = features.len();
        Batch {
            size: 1,
            n_pad: n,
            features: features.iter().flatten().copied().collect(),
            actions: action.to_vec(),
            effects: vec![0.0; n * 6],
            mask: vec![1.0; n],
            counts: vec![n],
            roles: vec![roles],
        }
    }

    pub fn rows(&self) -> usize {
        self.size * self.n_pad
    }

    pub fn feature_row(&self, sample: usize, object: usize) -> &[f64] {
        let r = (sample * self.n_pad + object) * 6;
        &self.features[r..r + 6]
    }

    pub fn effect_row(&self, sample: usize, object: usize) -> &[f64] {
        let r = (sample * self.n_pad + object) * 6;
        &self.effects[r..r + 6]
    }
}

/// Shuffled batches; the order depends only on `seed`.
pub fn load_batches(
    records: &[SampleRecord],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
    if batch_size == 0 {
        return Err(DataError::Argument("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(chunked(records, order, batch_size))
}

/// Batches in stored order.
pub fn ordered_batches(
    records: &[SampleRecord],
    batch_size: usize,
) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
    if batch_size == 0 {
        return Err(DataError::Argument("batch_size must be positive".into()));
    }
    Ok(chunked(records, (0..records.len()).collect(), batch_size))
}

fn chunked(
    records: &[SampleRecord],
    order: Vec<usize>,
    batch_size: usize,
) -> impl Iterator<Item = Batch> + '_ {
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |idx| Batch::from_records(idx.iter().map(|&i| &records[i])))
}
