//! Python bindings for the simulator, datasets, checkpoints and metrics.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reldeepsym::datasets::{self, Batch, Dataset, SampleRecord, Variant};
use reldeepsym::evals;
use reldeepsym::models::{self, Architecture, ModelCheckpoint, ModelConfig};
use reldeepsym::simenv::{self, ActionSpec, BlockKind, WorldState};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A settled scene of 2 to 4 blocks.
#[pyclass(name = "Scene", skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: WorldState,
}

#[pymethods]
impl PyScene {
    /// Random scene drawn from the spawn distribution.
    #[staticmethod]
    fn spawn(n: usize, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = simenv::spawn_scene(n, &mut rng).map_err(err)?;
        Ok(Self { inner })
    }

    /// `(kind, x, y, z)` per block, with kind `"short"` or `"long"`.
    #[getter]
    fn blocks(&self) -> Vec<(String, f64, f64, f64)> {
        self.inner
            .blocks
            .iter()
            .map(|b| (b.kind.as_str().to_string(), b.pos[0], b.pos[1], b.pos[2]))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.blocks.len()
    }

    /// Run one pick-and-release. Returns the next scene and per-object
    /// `[pick dx, dy, dz, release dx, dy, dz]`.
    fn execute(
        &self,
        grasp_index: usize,
        grasp_offset: f64,
        target_index: usize,
        release_offset: f64,
    ) -> PyResult<(PyScene, Vec<[f64; 6]>)> {
        let a = action(grasp_index, grasp_offset, target_index, release_offset);
        let (next, e) = simenv::execute(&self.inner, &a).map_err(err)?;
        Ok((PyScene { inner: next }, e.per_object))
    }

    /// Model input rows `[is_short, is_long, dx, dy, dz, is_target]`.
    fn features(
        &self,
        grasp_index: usize,
        grasp_offset: f64,
        target_index: usize,
        release_offset: f64,
    ) -> PyResult<Vec<[f64; 6]>> {
        let a = action(grasp_index, grasp_offset, target_index, release_offset);
        a.validate(self.inner.blocks.len()).map_err(err)?;
        Ok(simenv::relative_features(&self.inner, &a))
    }

    fn __repr__(&self) -> String {
        simenv::dump_scene(&self.inner)
    }
}

fn action(grasp_index: usize, grasp_offset: f64, target_index: usize, release_offset: f64) -> ActionSpec {
    ActionSpec {
        grasp_index,
        grasp_offset,
        target_index,
        release_offset,
    }
}

/// Trained or freshly initialised model.
#[pyclass(name = "Checkpoint", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        let arch: Architecture = arch.parse().map_err(err)?;
        let inner = ModelCheckpoint::new(ModelConfig::new(arch), seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ModelCheckpoint::load(&path).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.config.arch.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Hard-mode effect prediction for one scene and action.
    fn predict(
        &self,
        scene: &PyScene,
        grasp_index: usize,
        grasp_offset: f64,
        target_index: usize,
        release_offset: f64,
    ) -> PyResult<Vec<[f64; 6]>> {
        let a = action(grasp_index, grasp_offset, target_index, release_offset);
        a.validate(scene.inner.blocks.len()).map_err(err)?;
        let features = simenv::relative_features(&scene.inner, &a);
        let batch = Batch::single(&features, a.one_hot().map_err(err)?, (grasp_index, target_index));
        let flat = models::predict(&self.inner, &batch).map_err(err)?;
        Ok(flat
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect())
    }

    /// Mean per-object absolute effect error on one split of a dataset
    /// directory.
    #[pyo3(signature = (dataset_dir, split = "test"))]
    fn effect_error(&self, dataset_dir: PathBuf, split: &str) -> PyResult<f64> {
        let records = load_split(&dataset_dir, split)?;
        evals::effect_error(&self.inner, &records).map_err(err)
    }
}

fn load_split(dir: &std::path::Path, split: &str) -> PyResult<Vec<SampleRecord>> {
    let s = Dataset::load(dir).map_err(err)?.splits().map_err(err)?;
    match split {
        "train" => Ok(s.train),
        "val" => Ok(s.val),
        "test" => Ok(s.test),
        other => Err(err(format!("unknown split {other:?}"))),
    }
}

/// Generate a dataset variant (`2obj`, `3obj`, `4obj`, `mixed`) into `dir`.
/// Returns the sample count.
#[pyfunction]
fn generate_dataset(variant: &str, total: usize, seed: u64, dir: PathBuf) -> PyResult<usize> {
    let variant: Variant = variant.parse().map_err(err)?;
    let ds = datasets::generate(variant, total, seed, &dir).map_err(err)?;
    Ok(ds.records.len())
}

/// `(train, val, test)` sample counts of a generated dataset.
#[pyfunction]
fn dataset_splits(dir: PathBuf) -> PyResult<(usize, usize, usize)> {
    let s = Dataset::load(&dir).map_err(err)?.splits().map_err(err)?;
    Ok((s.train.len(), s.val.len(), s.test.len()))
}

/// Two-sided Welch t-test, returns `(t, df, p)`.
#[pyfunction]
fn welch_t(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = evals::welch_t(&a, &b).map_err(err)?;
    Ok((r.t, r.df, r.p))
}

#[pyfunction]
fn carry_height(kind: &str) -> PyResult<f64> {
    let kind = match kind {
        "short" => BlockKind::Short,
        "long" => BlockKind::Long,
        other => return Err(err(format!("unknown block kind {other:?}"))),
    };
    Ok(simenv::carry_height(kind))
}

#[pymodule]
fn pyreldeepsym(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_splits, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t, m)?)?;
    m.add_function(wrap_pyfunction!(carry_height, m)?)?;
    m.add("OFFSETS", simenv::OFFSETS.to_vec())?;
    Ok(())
}
