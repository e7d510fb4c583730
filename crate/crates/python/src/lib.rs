//! Python bindings: `import tada_kv`.
//!
//! Tensors cross the boundary as flat row-major lists of floats; the token
//! count is inferred from the length.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use tada_core::search::CalibrationSet;
use tada_core::{
    attend_naive, attend_streaming, deserialize_cache, load_weights, memory_ratio as core_memory_ratio,
    quantize_group as core_quantize_group, random_search as core_random_search, save_weights, score_plan,
    serialize_cache, BitWidth, BlockSpec, Error, ModelConfig, PrecisionPlan, RopeParams, SearchConfig, Tensor,
    ToyConfig, WeightSpec,
};

create_exception!(tada_kv, TadaError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => TadaError::new_err(format!("{}: {other}", other.kind())),
    }
}

fn bit_width(bits: u8) -> PyResult<BitWidth> {
    BitWidth::try_from(bits).map_err(to_py)
}

fn plan_from(bits: &[u8]) -> PyResult<PrecisionPlan> {
    Ok(PrecisionPlan::new(bits.iter().map(|&b| bit_width(b)).collect::<PyResult<_>>()?))
}

fn plan_bits(plan: &PrecisionPlan) -> Vec<u32> {
    plan.bits().iter().map(|b| b.bits() as u32).collect()
}

fn tensor(data: Vec<f32>, inner: &[usize]) -> PyResult<Tensor> {
    let row: usize = inner.iter().product();
    if row == 0 || !data.len().is_multiple_of(row) {
        return Err(to_py(Error::Shape(format!(
            "{} values do not split into rows of {row}",
            data.len()
        ))));
    }
    let mut shape = vec![data.len() / row];
    shape.extend_from_slice(inner);
    Tensor::new(shape, data).map_err(to_py)
}

/// Min-max quantizes one group. Returns `(codes, scale, min)`.
#[pyfunction]
fn quantize_group(values: Vec<f32>, bits: u8) -> PyResult<(Vec<u32>, f32, f32)> {
    let g = core_quantize_group(&values, bit_width(bits)?).map_err(to_py)?;
    Ok((g.codes.into_iter().map(u32::from).collect(), g.scale, g.min))
}

/// Compressed size over 16-bit size for a model with the given per-layer bits.
#[pyfunction]
#[pyo3(signature = (num_kv_heads, head_dim, plan, tokens=1, residual_length=0, include_residual=false))]
fn memory_ratio(
    num_kv_heads: usize,
    head_dim: usize,
    plan: Vec<u8>,
    tokens: usize,
    residual_length: usize,
    include_residual: bool,
) -> PyResult<f64> {
    let plan = plan_from(&plan)?;
    let cfg = ModelConfig {
        num_layers: plan.len(),
        num_q_heads: num_kv_heads,
        num_kv_heads,
        head_dim,
        residual_length,
        rope: RopeParams::new(head_dim, 10000.0).map_err(to_py)?,
        plan,
    };
    cfg.validate().map_err(to_py)?;
    Ok(core_memory_ratio(&cfg, tokens, include_residual))
}

/// Compressed key/value cache for one layer.
#[pyclass(module = "tada_kv")]
struct LayerCache {
    inner: tada_core::LayerCache,
}

#[pymethods]
impl LayerCache {
    #[new]
    #[pyo3(signature = (num_heads, head_dim, residual_length, bits=4))]
    fn new(num_heads: usize, head_dim: usize, residual_length: usize, bits: u8) -> PyResult<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(to_py(Error::Config("num_heads and head_dim must be positive".into())));
        }
        Ok(Self {
            inner: tada_core::LayerCache::new(num_heads, head_dim, residual_length, bit_width(bits)?),
        })
    }

    /// Appends tokens given as flat `[tokens, heads, head_dim]` keys and values.
    fn append(&mut self, keys: Vec<f32>, values: Vec<f32>) -> PyResult<()> {
        let inner = [self.inner.num_heads(), self.inner.head_dim()];
        let k = tensor(keys, &inner)?;
        let v = tensor(values, &inner)?;
        self.inner.append_tokens(&k, &v).map_err(to_py)
    }

    /// Reconstructed keys and values of one head, each flat `[tokens, head_dim]`.
    fn reconstruct(&self, head: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let (k, v) = self.inner.reconstruct(head).map_err(to_py)?;
        Ok((k.into_data(), v.into_data()))
    }

    /// Attention output for flat `[num_q_heads, head_dim]` queries.
    #[pyo3(signature = (queries, block_tokens=None))]
    fn attend(&self, queries: Vec<f32>, block_tokens: Option<usize>) -> PyResult<Vec<f32>> {
        let q = tensor(queries, &[self.inner.head_dim()])?;
        let out = match block_tokens {
            Some(bt) => attend_streaming(&q, &self.inner, BlockSpec::new(bt).map_err(to_py)?),
            None => attend_naive(&q, &self.inner, false),
        };
        Ok(out.map_err(to_py)?.output.into_data())
    }

    fn serialize<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &serialize_cache(&self.inner))
    }

    #[staticmethod]
    fn deserialize(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: deserialize_cache(data).map_err(to_py)?,
        })
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.inner.bits().bits()
    }

    #[getter]
    fn compressed_tokens(&self) -> usize {
        self.inner.compressed_tokens()
    }

    #[getter]
    fn residual_count(&self) -> usize {
        self.inner.residual_count()
    }

    fn __len__(&self) -> usize {
        self.inner.total_tokens()
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "LayerCache(heads={}, head_dim={}, bits={}, compressed={}, residual={})",
            self.inner.num_heads(),
            self.inner.head_dim(),
            self.inner.bits(),
            self.inner.compressed_tokens(),
            self.inner.residual_count()
        )
    }
}

/// Small decoder-only transformer wired to the compressed cache.
#[pyclass(module = "tada_kv")]
struct ToyModel {
    inner: tada_core::ToyModel,
}

#[pymethods]
impl ToyModel {
    /// Seeded random weights. `config_json` overrides the default toy geometry.
    #[staticmethod]
    #[pyo3(signature = (seed=0, config_json=None, identical_heads=false))]
    fn synthetic(seed: u64, config_json: Option<&str>, identical_heads: bool) -> PyResult<Self> {
        let config = match config_json {
            Some(text) => ToyConfig::from_json(text).map_err(to_py)?,
            None => ToyConfig::toy(),
        };
        let spec = if identical_heads {
            WeightSpec::identical_heads(seed)
        } else {
            WeightSpec::new(seed)
        };
        Ok(Self {
            inner: tada_core::ToyModel::synthetic(config, &spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: load_weights(data).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &save_weights(&self.inner))
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.cache_config().num_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn plan(&self) -> Vec<u32> {
        plan_bits(&self.inner.cache_config().plan)
    }

    #[getter]
    fn residual_length(&self) -> usize {
        self.inner.cache_config().residual_length
    }

    fn config_json(&self) -> String {
        self.inner.config().to_json()
    }

    /// Greedy continuation. Returns the prompt followed by the new ids.
    #[pyo3(signature = (prompt, max_new_tokens, plan=None, residual_length=None, block_tokens=64))]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        max_new_tokens: usize,
        plan: Option<Vec<u8>>,
        residual_length: Option<usize>,
        block_tokens: usize,
    ) -> PyResult<Vec<u32>> {
        let cfg = self.inner.cache_config();
        let plan = match plan {
            Some(p) => plan_from(&p)?,
            None => cfg.plan.clone(),
        };
        let r = residual_length.unwrap_or(cfg.residual_length);
        let block = BlockSpec::new(block_tokens).map_err(to_py)?;
        py.detach(|| self.inner.generate(&prompt, max_new_tokens, &plan, r, block))
            .map_err(to_py)
    }

    /// Mean next-token negative log-likelihood of `sequences` under `plan`.
    fn score(&self, py: Python<'_>, plan: Vec<u8>, sequences: Vec<Vec<u32>>) -> PyResult<f64> {
        let plan = plan_from(&plan)?;
        let calib = CalibrationSet::new(sequences).map_err(to_py)?;
        py.detach(|| score_plan(&self.inner, &plan, &calib)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.cache_config();
        format!(
            "ToyModel(layers={}, q_heads={}, kv_heads={}, head_dim={}, vocab={})",
            c.num_layers,
            c.num_q_heads,
            c.num_kv_heads,
            c.head_dim,
            self.inner.config().vocab_size
        )
    }
}

/// Random search over per-layer bit widths. Returns `(best_plan, report_json)`.
/// Without `sequences`, calibration data is sampled from the model itself.
#[pyfunction]
#[pyo3(signature = (
    model, sequences=None, candidates=64, bits=vec![2, 4, 8], budget=None, seed=0, anchors=true,
    calib_seqs=4, calib_len=32
))]
#[allow(clippy::too_many_arguments)]
fn random_search(
    py: Python<'_>,
    model: PyRef<'_, ToyModel>,
    sequences: Option<Vec<Vec<u32>>>,
    candidates: usize,
    bits: Vec<u8>,
    budget: Option<f64>,
    seed: u64,
    anchors: bool,
    calib_seqs: usize,
    calib_len: usize,
) -> PyResult<(Vec<u32>, String)> {
    let search = SearchConfig {
        num_candidates: candidates,
        bit_choices: bits.iter().map(|&b| bit_width(b)).collect::<PyResult<_>>()?,
        memory_budget: budget,
        seed,
        include_uniform_anchors: anchors,
    };
    let model = &model.inner;
    py.detach(|| {
        let calib = match sequences {
            Some(s) => CalibrationSet::new(s)?,
            None => CalibrationSet::sampled(model, seed, calib_seqs, calib_len)?,
        };
        core_random_search(&search, &calib, model)
    })
    .map(|(best, report)| (plan_bits(&best), report.to_json()))
    .map_err(to_py)
}

#[pymodule]
fn tada_kv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TadaError", m.py().get_type::<TadaError>())?;
    m.add_class::<LayerCache>()?;
    m.add_class::<ToyModel>()?;
    m.add_function(wrap_pyfunction!(quantize_group, m)?)?;
    m.add_function(wrap_pyfunction!(memory_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(random_search, m)?)?;
    Ok(())
}
