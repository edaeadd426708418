//! Python bindings over the core library: Lorentz geometry primitives
//! plus the generate/select/train/embed/probe/diagnose pipeline behind
//! opaque handles. Vectors cross the boundary as plain lists of floats.

// The pyo3 macros expand to identity PyErr conversions.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::Path;

use delst_core::data;
use delst_core::encoders::{self, EncoderDims};
use delst_core::eval;
use delst_core::lorentz;
use delst_core::losses;
use delst_core::trainer;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn curvature(c: f64) -> PyResult<lorentz::Curvature> {
    if !(c.is_finite() && c > 0.0) {
        return Err(PyValueError::new_err("curvature must be a positive real"));
    }
    Ok(lorentz::Curvature::new(c))
}

fn cone(k_aper: f64) -> PyResult<lorentz::ConeConstants> {
    if !(k_aper.is_finite() && k_aper > 0.0) {
        return Err(PyValueError::new_err("k_aper must be a positive real"));
    }
    Ok(lorentz::ConeConstants::new(k_aper))
}

/// A point on the upper sheet of the Lorentz hyperboloid.
#[pyclass(frozen)]
struct Point {
    inner: lorentz::HyperPoint,
}

#[pymethods]
impl Point {
    /// Lift a tangent vector at the origin onto the hyperboloid.
    #[staticmethod]
    #[pyo3(signature = (tangent, curvature = 1.0))]
    fn exp_map(tangent: Vec<f64>, curvature: f64) -> PyResult<Self> {
        let c = crate::curvature(curvature)?;
        Ok(Point { inner: lorentz::exp_map(&lorentz::TangentVec::new(tangent), c) })
    }

    /// Rebuild a point from its spatial components.
    #[staticmethod]
    #[pyo3(signature = (space, curvature = 1.0))]
    fn from_space(space: Vec<f64>, curvature: f64) -> PyResult<Self> {
        let c = crate::curvature(curvature)?;
        Ok(Point { inner: lorentz::HyperPoint::from_space(space, c) })
    }

    #[getter]
    fn space(&self) -> Vec<f64> {
        self.inner.space.clone()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    fn space_norm(&self) -> f64 {
        self.inner.space_norm()
    }

    fn __repr__(&self) -> String {
        format!("Point(dim={}, time={:.6})", self.inner.space.len(), self.inner.time)
    }
}

/// Minkowski bilinear form of two points.
#[pyfunction]
fn lorentz_inner(u: &Point, v: &Point) -> f64 {
    lorentz::lorentz_inner(&u.inner, &v.inner)
}

/// Half aperture of the entailment cone rooted at a point.
#[pyfunction]
#[pyo3(signature = (general, k_aper = 0.1, curvature = 1.0))]
fn half_aperture(general: &Point, k_aper: f64, curvature: f64) -> PyResult<f64> {
    Ok(lorentz::half_aperture(&general.inner, cone(k_aper)?, crate::curvature(curvature)?))
}

/// Angle at `general` between its axis ray and the geodesic to `specific`.
#[pyfunction]
#[pyo3(signature = (general, specific, curvature = 1.0))]
fn exterior_angle(general: &Point, specific: &Point, curvature: f64) -> PyResult<f64> {
    Ok(lorentz::exterior_angle(&general.inner, &specific.inner, crate::curvature(curvature)?))
}

/// Hinge excess of the exterior angle over the cone half aperture.
#[pyfunction]
#[pyo3(signature = (general, specific, k_aper = 0.1, curvature = 1.0))]
fn cone_violation(general: &Point, specific: &Point, k_aper: f64, curvature: f64) -> PyResult<f64> {
    Ok(lorentz::cone_violation(
        &general.inner,
        &specific.inner,
        cone(k_aper)?,
        crate::curvature(curvature)?,
    ))
}

/// In-memory spot corpus: expression, image features, metadata.
#[pyclass(frozen)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Deterministic synthetic corpus with class-linked NGEC structure.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, n_slides = 4, spots_per_slide = 500, n_genes = 300, n_classes = 4, feat_dim = 512, hierarchy_strength = 1.0))]
    fn synthetic(
        seed: u64,
        n_slides: usize,
        spots_per_slide: usize,
        n_genes: usize,
        n_classes: usize,
        feat_dim: usize,
        hierarchy_strength: f64,
    ) -> Self {
        Dataset {
            inner: data::generate_synthetic(&data::SyntheticConfig {
                seed,
                n_slides,
                spots_per_slide,
                n_genes,
                n_classes,
                feat_dim,
                hierarchy_strength,
            }),
        }
    }

    /// Read expression.tsv, features.tsv, metadata.tsv from a directory.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        data::load_dataset(Path::new(dir)).map(|inner| Dataset { inner }).map_err(err)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, Path::new(dir)).map_err(err)
    }

    #[getter]
    fn n_spots(&self) -> usize {
        self.inner.spots.len()
    }

    #[getter]
    fn n_genes(&self) -> usize {
        self.inner.n_genes()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim
    }

    #[getter]
    fn gene_names(&self) -> Vec<String> {
        self.inner.gene_names.clone()
    }

    fn slide_ids(&self) -> Vec<String> {
        self.inner.slides().into_iter().map(|(id, _)| id).collect()
    }

    fn spot_ids(&self) -> Vec<String> {
        self.inner.spots.iter().map(|s| s.spot_id.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<u32>> {
        self.inner.spots.iter().map(|s| s.label).collect()
    }

    fn ngec(&self) -> Vec<u64> {
        self.inner.spots.iter().map(|s| s.ngec).collect()
    }

    fn expression(&self, spot: usize) -> PyResult<Vec<f64>> {
        self.spot(spot).map(|s| s.expr.clone())
    }

    fn image_features(&self, spot: usize) -> PyResult<Vec<f64>> {
        self.spot(spot).map(|s| s.image_feat.clone())
    }
}

impl Dataset {
    fn spot(&self, i: usize) -> PyResult<&data::Spot> {
        self.inner
            .spots
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("spot index {i} out of range")))
    }
}

/// Gene panel chosen by one selection strategy.
#[pyclass(frozen)]
struct GenePanel {
    inner: data::GenePanel,
}

#[pymethods]
impl GenePanel {
    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.name()
    }

    #[getter]
    fn gene_count(&self) -> usize {
        self.inner.gene_count
    }

    #[getter]
    fn n_total_genes(&self) -> usize {
        self.inner.n_total_genes
    }

    /// Selected gene indices for one slide (identical across slides for
    /// the global strategies).
    fn indices_for(&self, slide_id: &str) -> PyResult<Vec<usize>> {
        self.inner.indices_for(slide_id).map(|ix| ix.to_vec()).map_err(err)
    }
}

/// Rank genes by normalized variance under the named strategy.
#[pyfunction]
#[pyo3(signature = (dataset, strategy = "e-overlap-hvg", gene_count = None))]
fn select_genes(
    dataset: &Dataset,
    strategy: &str,
    gene_count: Option<usize>,
) -> PyResult<GenePanel> {
    let s: data::Strategy = strategy.parse().map_err(PyValueError::new_err)?;
    let count = gene_count.unwrap_or_else(|| s.default_gene_count());
    data::select_hvg(&dataset.inner, s, count).map(|inner| GenePanel { inner }).map_err(err)
}

/// Trained encoder pair with its optimizer state and epoch history.
#[pyclass(frozen)]
struct TrainedModel {
    gene: encoders::GeneEncoder,
    proj: encoders::ImageProjector,
    state: trainer::AdamState,
    history: Vec<trainer::EpochRecord>,
}

#[pymethods]
impl TrainedModel {
    #[getter]
    fn gene_count(&self) -> usize {
        self.gene.gene_count
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.gene.n
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.proj.feat_dim
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.proj.hidden
    }

    /// Per-epoch loss terms; epoch 0 is the pre-training evaluation.
    fn history(&self, py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
        self.history
            .iter()
            .map(|e| {
                let d = PyDict::new_bound(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("l_cont", e.l_cont)?;
                d.set_item("l_ent_cross", e.l_ent_cross)?;
                d.set_item("l_ent_intra", e.l_ent_intra)?;
                d.set_item("l_final", e.l_final)?;
                d.set_item("violation_rate", e.violation_rate)?;
                Ok(d.unbind())
            })
            .collect()
    }

    #[pyo3(signature = (expr, curvature = 1.0))]
    fn encode_gene(&self, expr: Vec<f64>, curvature: f64) -> PyResult<Point> {
        if expr.len() != self.gene.gene_count {
            return Err(PyValueError::new_err(format!(
                "expected {} panel expression values, got {}",
                self.gene.gene_count,
                expr.len()
            )));
        }
        Ok(Point { inner: encoders::encode_gene(&self.gene, &expr, crate::curvature(curvature)?) })
    }

    #[pyo3(signature = (features, curvature = 1.0))]
    fn encode_image(&self, features: Vec<f64>, curvature: f64) -> PyResult<Point> {
        if features.len() != self.proj.feat_dim {
            return Err(PyValueError::new_err(format!(
                "expected {} image features, got {}",
                self.proj.feat_dim,
                features.len()
            )));
        }
        Ok(Point {
            inner: encoders::encode_image(&self.proj, &features, crate::curvature(curvature)?),
        })
    }

    /// Embed every labeled spot; returns rows, spot_ids, labels, ngec.
    #[pyo3(signature = (dataset, panel, modality = "image", components = "space", curvature = 1.0))]
    fn embed(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        panel: &GenePanel,
        modality: &str,
        components: &str,
        curvature: f64,
    ) -> PyResult<Py<PyDict>> {
        let m: eval::Modality = modality.parse().map_err(PyValueError::new_err)?;
        let comp: eval::Components = components.parse().map_err(PyValueError::new_err)?;
        let e = eval::embed_dataset(
            &self.gene,
            &self.proj,
            &dataset.inner,
            &panel.inner,
            m,
            comp,
            crate::curvature(curvature)?,
        )
        .map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("rows", e.rows)?;
        d.set_item("spot_ids", e.spot_ids)?;
        d.set_item("labels", e.labels)?;
        d.set_item("ngec", e.ngec)?;
        Ok(d.unbind())
    }

    /// Hierarchy diagnostics: NGEC/norm correlations, violation rate,
    /// aperture histograms.
    #[pyo3(signature = (dataset, panel, k_aper = 0.1, curvature = 1.0))]
    fn diagnostics(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        panel: &GenePanel,
        k_aper: f64,
        curvature: f64,
    ) -> PyResult<Py<PyDict>> {
        let r = eval::hierarchy_diagnostics(
            &self.gene,
            &self.proj,
            &dataset.inner,
            &panel.inner,
            cone(k_aper)?,
            crate::curvature(curvature)?,
        )
        .map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("spearman_gene", r.spearman_gene)?;
        d.set_item("spearman_image", r.spearman_image)?;
        d.set_item("violation_rate", r.violation_rate)?;
        d.set_item("aperture_hist_gene", r.aperture_hist_gene)?;
        d.set_item("aperture_hist_image", r.aperture_hist_image)?;
        Ok(d.unbind())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = trainer::Checkpoint {
            gene: self.gene.clone(),
            proj: self.proj.clone(),
            state: self.state.clone(),
            completed_epochs: self.history.len().saturating_sub(1) as u32,
            history: self.history.clone(),
        };
        trainer::checkpoint_save(Path::new(path), &ckpt).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = trainer::checkpoint_load(Path::new(path)).map_err(err)?;
        Ok(TrainedModel {
            gene: ckpt.gene,
            proj: ckpt.proj,
            state: ckpt.state,
            history: ckpt.history,
        })
    }
}

/// Train the encoder pair on a dataset under one gene panel.
#[pyfunction]
#[pyo3(signature = (
    dataset, panel, epochs = 15, batch_size = 1024, lr = 5e-5, weight_decay = 0.2,
    tau = 0.07, lambda_ = 0.1, beta = 0.1, q = None, seed = 0,
    sim_mode = "cosine-full", symmetric = false, enable_cmel = true,
    enable_imel = true, curvature = 1.0, k_aper = 0.1, hidden = 64, embed_dim = 32,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &Dataset,
    panel: &GenePanel,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    tau: f64,
    lambda_: f64,
    beta: f64,
    q: Option<usize>,
    seed: u64,
    sim_mode: &str,
    symmetric: bool,
    enable_cmel: bool,
    enable_imel: bool,
    curvature: f64,
    k_aper: f64,
    hidden: usize,
    embed_dim: usize,
) -> PyResult<TrainedModel> {
    let mode: losses::SimMode = sim_mode.parse().map_err(PyValueError::new_err)?;
    let cfg = trainer::TrainConfig {
        epochs,
        batch_size,
        lr,
        weight_decay,
        tau,
        lambda: lambda_,
        beta,
        q,
        seed,
        sim_mode: mode,
        symmetric,
        enable_cmel,
        enable_imel,
        curvature,
        k_aper,
    };
    if epochs < 1
        || batch_size < 2
        || tau.is_nan()
        || tau <= 0.0
        || lr.is_nan()
        || lr < 0.0
        || weight_decay < 0.0
    {
        return Err(PyValueError::new_err(
            "need epochs >= 1, batch_size >= 2, tau > 0, lr >= 0, weight_decay >= 0",
        ));
    }
    if 2 * cfg.resolved_q() > batch_size {
        return Err(PyValueError::new_err("2q must not exceed batch_size"));
    }
    crate::curvature(curvature)?;
    cone(k_aper)?;
    let dims = EncoderDims {
        gene_count: panel.inner.gene_count,
        feat_dim: dataset.inner.feat_dim,
        hidden,
        n: embed_dim,
    };
    let r = trainer::train(&dataset.inner, &panel.inner, &cfg, &dims).map_err(err)?;
    Ok(TrainedModel { gene: r.gene, proj: r.proj, state: r.state, history: r.history })
}

/// Five-seed stratified linear probe; returns per_seed, mean, sd.
#[pyfunction]
#[pyo3(signature = (rows, labels, n_classes, n_seeds = 5, epochs = 250, lr = 0.5, patience = 30, base_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn linear_probe(
    py: Python<'_>,
    rows: Vec<Vec<f64>>,
    labels: Vec<u32>,
    n_classes: usize,
    n_seeds: usize,
    epochs: usize,
    lr: f64,
    patience: usize,
    base_seed: u64,
) -> PyResult<Py<PyDict>> {
    if rows.len() != labels.len() {
        return Err(PyValueError::new_err("rows and labels must have equal length"));
    }
    if n_seeds < 1 || epochs < 1 || lr.is_nan() || lr <= 0.0 {
        return Err(PyValueError::new_err("need n_seeds >= 1, epochs >= 1, lr > 0"));
    }
    let cfg = eval::ProbeConfig { n_classes, n_seeds, epochs, lr, patience, base_seed };
    let r = eval::linear_probe(&rows, &labels, &cfg).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("per_seed", r.per_seed)?;
    d.set_item("mean", r.mean)?;
    d.set_item("sd", r.sd)?;
    Ok(d.unbind())
}

/// Full loss stack over aligned image/gene point lists.
#[pyfunction]
#[pyo3(signature = (
    image_points, gene_points, ngec, lambda_ = 0.1, beta = 0.1, tau = 0.07,
    q = 150, sim_mode = "cosine-full", symmetric = false, k_aper = 0.1, curvature = 1.0,
))]
#[allow(clippy::too_many_arguments)]
fn final_loss(
    py: Python<'_>,
    image_points: Vec<PyRef<Point>>,
    gene_points: Vec<PyRef<Point>>,
    ngec: Vec<u64>,
    lambda_: f64,
    beta: f64,
    tau: f64,
    q: usize,
    sim_mode: &str,
    symmetric: bool,
    k_aper: f64,
    curvature: f64,
) -> PyResult<Py<PyDict>> {
    if image_points.len() != gene_points.len() || image_points.len() != ngec.len() {
        return Err(PyValueError::new_err(
            "image_points, gene_points, and ngec must have equal length",
        ));
    }
    if tau.is_nan() || tau <= 0.0 || q < 1 {
        return Err(PyValueError::new_err("need tau > 0 and q >= 1"));
    }
    let mode: losses::SimMode = sim_mode.parse().map_err(PyValueError::new_err)?;
    let batch = losses::BatchEmbeddings::new(
        image_points.iter().map(|p| p.inner.clone()).collect(),
        gene_points.iter().map(|p| p.inner.clone()).collect(),
        ngec,
    );
    let w = losses::LossWeights { lambda: lambda_, beta, tau, q };
    let b = losses::final_loss(
        &batch,
        &w,
        mode,
        symmetric,
        cone(k_aper)?,
        crate::curvature(curvature)?,
    );
    let d = PyDict::new_bound(py);
    d.set_item("l_cont", b.l_cont)?;
    d.set_item("l_ent_cross", b.l_ent_cross)?;
    d.set_item("l_ent_intra_gene", b.l_ent_intra_gene)?;
    d.set_item("l_ent_intra_image", b.l_ent_intra_image)?;
    d.set_item("l_ent_intra", b.l_ent_intra)?;
    d.set_item("l_final", b.l_final)?;
    Ok(d.unbind())
}

/// Hyperbolic image-gene pretraining with dual entailment learning.
#[pymodule]
fn delst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Point>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<GenePanel>()?;
    m.add_class::<TrainedModel>()?;
    m.add_function(wrap_pyfunction!(lorentz_inner, m)?)?;
    m.add_function(wrap_pyfunction!(half_aperture, m)?)?;
    m.add_function(wrap_pyfunction!(exterior_angle, m)?)?;
    m.add_function(wrap_pyfunction!(cone_violation, m)?)?;
    m.add_function(wrap_pyfunction!(select_genes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(final_loss, m)?)?;
    Ok(())
}
