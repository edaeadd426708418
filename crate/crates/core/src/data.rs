//! Spot data model, gene selection, NGEC, dataset files, and a synthetic
//! generator with a controllable hierarchy signal.
//!
//! A dataset lives in three tab-separated files sharing one spot-ID set:
//! `expression.tsv` (header `spot_id` + gene names, one spot per row),
//! `features.tsv` (spot_id + feat_dim reals, no header), and
//! `metadata.tsv` (header `spot_id slide_id x y radius label`, label may
//! be empty).

use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const EXPRESSION_FILE: &str = "expression.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const METADATA_FILE: &str = "metadata.tsv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    /// Cell-level problem; line and column are 1-based.
    #[error("{file}:{line}:{column}: {message}")]
    Malformed { file: String, line: usize, column: usize, message: String },
    /// Cross-file or cross-slide inconsistency.
    #[error("{0}")]
    Schema(String),
}

fn io_err(file: &str, source: std::io::Error) -> DataError {
    DataError::Io { file: file.to_string(), source }
}

fn cell_err(file: &str, line: usize, column: usize, message: impl Into<String>) -> DataError {
    DataError::Malformed { file: file.to_string(), line, column, message: message.into() }
}

/// One measured spot: full expression vector, image feature vector, and
/// bookkeeping. `ngec` always equals the nonzero count of `expr`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spot {
    pub spot_id: String,
    pub slide_id: String,
    pub expr: Vec<f64>,
    pub image_feat: Vec<f64>,
    pub ngec: u64,
    pub label: Option<u32>,
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// An in-memory dataset: shared gene name list plus spots in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gene_names: Vec<String>,
    pub feat_dim: usize,
    pub spots: Vec<Spot>,
}

impl Dataset {
    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    /// Slide ids in first-appearance order with their spot indices.
    pub fn slides(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.spots.iter().enumerate() {
            if !map.contains_key(&s.slide_id) {
                order.push(s.slide_id.clone());
            }
            map.entry(s.slide_id.clone()).or_default().push(i);
        }
        order.into_iter().map(|id| (id.clone(), map.remove(&id).unwrap())).collect()
    }
}

/// Count of strictly positive entries. Negative entries violate the
/// expression contract.
pub fn compute_ngec(expr: &[f64]) -> u64 {
    assert!(expr.iter().all(|&v| v >= 0.0), "compute_ngec: negative expression entry");
    expr.iter().filter(|&&v| v > 0.0).count() as u64
}

/// Gene selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Top-K by variance per slide, independent panels.
    Hvg,
    /// Top-K over pooled spots, restricted to genes present in every slide.
    OverlapHvg,
    /// OverlapHvg after dropping genes zero in more than 90% of pooled spots.
    EOverlapHvg,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Hvg => "hvg",
            Strategy::OverlapHvg => "overlap-hvg",
            Strategy::EOverlapHvg => "e-overlap-hvg",
        }
    }

    /// Conventional panel size for the strategy: 128 per-slide, 100 global.
    pub fn default_gene_count(&self) -> usize {
        match self {
            Strategy::Hvg => 128,
            _ => 100,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hvg" => Ok(Strategy::Hvg),
            "overlap-hvg" => Ok(Strategy::OverlapHvg),
            "e-overlap-hvg" => Ok(Strategy::EOverlapHvg),
            other => Err(format!(
                "unknown strategy '{other}' (expected hvg, overlap-hvg, or e-overlap-hvg)"
            )),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Gene indices selected by one strategy; per-slide lists for `Hvg`,
/// one global list otherwise. Indices point into the dataset's gene list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PanelIndices {
    Global(Vec<usize>),
    PerSlide(Vec<SlidePanel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePanel {
    pub slide_id: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePanel {
    pub strategy: Strategy,
    pub gene_count: usize,
    /// Width of the full gene vector the indices point into.
    pub n_total_genes: usize,
    pub indices: PanelIndices,
}

impl GenePanel {
    /// The index list that applies to the given slide.
    pub fn indices_for(&self, slide_id: &str) -> Result<&[usize], DataError> {
        match &self.indices {
            PanelIndices::Global(v) => Ok(v),
            PanelIndices::PerSlide(slides) => slides
                .iter()
                .find(|s| s.slide_id == slide_id)
                .map(|s| s.indices.as_slice())
                .ok_or_else(|| DataError::Schema(format!("panel has no slide '{slide_id}'"))),
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    xs.sort_by(|a, b| a.partial_cmp(b).expect("median: non-finite value"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) * 0.5
    }
}

/// Per-spot scale factors: slide median total over spot total (0 for
/// empty spots). Normalization is per-slide even when ranking is pooled.
fn scale_factors(ds: &Dataset) -> Vec<f64> {
    let totals: Vec<f64> = ds.spots.iter().map(|s| s.expr.iter().sum()).collect();
    let mut factors = vec![0.0; ds.spots.len()];
    for (_, idxs) in ds.slides() {
        let mut slide_totals: Vec<f64> = idxs.iter().map(|&i| totals[i]).collect();
        let med = median(&mut slide_totals);
        for &i in &idxs {
            factors[i] = if totals[i] > 0.0 { med / totals[i] } else { 0.0 };
        }
    }
    factors
}

/// Population variance of log1p-scaled expression per gene, over the
/// given spots.
fn normalized_variances(ds: &Dataset, factors: &[f64], spot_idxs: &[usize]) -> Vec<f64> {
    let g = ds.n_genes();
    let n = spot_idxs.len() as f64;
    let mut mean = vec![0.0; g];
    let mut sq = vec![0.0; g];
    for &i in spot_idxs {
        let f = factors[i];
        for (j, &raw) in ds.spots[i].expr.iter().enumerate() {
            let v = (raw * f).ln_1p();
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    (0..g).map(|j| (sq[j] / n - (mean[j] / n) * (mean[j] / n)).max(0.0)).collect()
}

/// Top-`count` gene indices by variance, descending, ties broken by
/// ascending gene index.
fn top_by_variance(variances: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| {
        variances[b].partial_cmp(&variances[a]).expect("variance: non-finite").then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Select a gene panel. A gene counts as present in a slide when it has a
/// nonzero raw count in at least one of the slide's spots.
pub fn select_hvg(
    ds: &Dataset,
    strategy: Strategy,
    gene_count: usize,
) -> Result<GenePanel, DataError> {
    assert!(gene_count >= 1, "select_hvg: gene_count must be positive");
    if ds.spots.is_empty() {
        return Err(DataError::Schema("cannot select genes from an empty dataset".into()));
    }
    let g = ds.n_genes();
    let factors = scale_factors(ds);
    let slides = ds.slides();

    let indices = match strategy {
        Strategy::Hvg => {
            if gene_count > g {
                return Err(DataError::Schema(format!(
                    "panel needs {gene_count} genes but the dataset has only {g}"
                )));
            }
            let mut per_slide = Vec::new();
            for (slide_id, idxs) in &slides {
                let variances = normalized_variances(ds, &factors, idxs);
                let all: Vec<usize> = (0..g).collect();
                per_slide.push(SlidePanel {
                    slide_id: slide_id.clone(),
                    indices: top_by_variance(&variances, &all, gene_count),
                });
            }
            PanelIndices::PerSlide(per_slide)
        }
        Strategy::OverlapHvg | Strategy::EOverlapHvg => {
            let mut in_all = vec![true; g];
            for (_, idxs) in &slides {
                let mut present = vec![false; g];
                for &i in idxs {
                    for (j, &raw) in ds.spots[i].expr.iter().enumerate() {
                        if raw > 0.0 {
                            present[j] = true;
                        }
                    }
                }
                for (a, p) in in_all.iter_mut().zip(&present) {
                    *a &= p;
                }
            }
            let mut candidates: Vec<usize> = (0..g).filter(|&j| in_all[j]).collect();
            if candidates.len() < gene_count {
                return Err(DataError::Schema(format!(
                    "cross-slide gene intersection has {} genes, need {gene_count}",
                    candidates.len()
                )));
            }
            if strategy == Strategy::EOverlapHvg {
                let n_spots = ds.spots.len() as f64;
                candidates.retain(|&j| {
                    let zeros = ds.spots.iter().filter(|s| s.expr[j] == 0.0).count() as f64;
                    zeros / n_spots <= 0.9
                });
                if candidates.len() < gene_count {
                    return Err(DataError::Schema(format!(
                        "only {} genes remain after the 90% zero-rate filter, need {gene_count}",
                        candidates.len()
                    )));
                }
            }
            let all_spots: Vec<usize> = (0..ds.spots.len()).collect();
            let variances = normalized_variances(ds, &factors, &all_spots);
            PanelIndices::Global(top_by_variance(&variances, &candidates, gene_count))
        }
    };
    let panel = GenePanel { strategy, gene_count, n_total_genes: g, indices };
    match &panel.indices {
        PanelIndices::Global(v) => assert_eq!(v.len(), gene_count),
        PanelIndices::PerSlide(s) => s.iter().for_each(|p| assert_eq!(p.indices.len(), gene_count)),
    }
    Ok(panel)
}

/// Encoder input rows: the log1p-scaled values of each spot's panel genes.
pub fn encoder_inputs(ds: &Dataset, panel: &GenePanel) -> Result<Vec<Vec<f64>>, DataError> {
    if panel.n_total_genes != ds.n_genes() {
        return Err(DataError::Schema(format!(
            "panel was built over {} genes but the dataset has {}",
            panel.n_total_genes,
            ds.n_genes()
        )));
    }
    let factors = scale_factors(ds);
    let mut rows = Vec::with_capacity(ds.spots.len());
    for (i, spot) in ds.spots.iter().enumerate() {
        let idxs = panel.indices_for(&spot.slide_id)?;
        rows.push(idxs.iter().map(|&j| (spot.expr[j] * factors[i]).ln_1p()).collect());
    }
    Ok(rows)
}

/// Synthetic corpus shape and the NGEC↔class-specificity coupling knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_slides: usize,
    pub spots_per_slide: usize,
    pub n_genes: usize,
    pub n_classes: usize,
    pub feat_dim: usize,
    /// 0 = NGEC independent of class; 1 = NGEC ranks follow class
    /// specificity.
    pub hierarchy_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_slides: 4,
            spots_per_slide: 500,
            n_genes: 300,
            n_classes: 4,
            feat_dim: 512,
            hierarchy_strength: 1.0,
            seed: 0,
        }
    }
}

/// Per-spot class specificity score used by the generator: deeper
/// (higher-id) classes are more specific.
pub fn class_specificity(class: u32, n_classes: usize) -> f64 {
    (class as f64 + 1.0) / n_classes as f64
}

/// Deterministic synthetic dataset. Expression is a class signature times
/// a noisy magnitude, Bernoulli-sparsified so that NGEC tracks a per-spot
/// activity that interpolates (by `hierarchy_strength`) between the class
/// specificity score and an independent uniform draw. Image features are
/// a class signature in feature space plus Gaussian noise.
/// Magnitude of nonzero synthetic counts. Sized so the log1p-normalized
/// panel inputs give xavier-initialized encoders tangent norms of order
/// one: exp_map then lands where apertures and exterior angles have
/// usable gradients instead of sinh-saturating, keeping the entailment
/// signal recoverable at trainable scale.
const EXPR_SCALE: f64 = 0.2;
/// Image feature magnitude (signature and noise alike), sized for the
/// same tangent-norm regime through the projector.
const IMG_SCALE: f64 = 0.1;

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Dataset {
    assert!(cfg.n_slides >= 1, "generate: n_slides must be positive");
    assert!(cfg.n_genes >= 1, "generate: n_genes must be positive");
    assert!(cfg.n_classes >= 1, "generate: n_classes must be positive");
    assert!(cfg.feat_dim >= 1, "generate: feat_dim must be positive");
    assert!(
        (0.0..=1.0).contains(&cfg.hierarchy_strength),
        "generate: hierarchy_strength must lie in [0, 1]"
    );

    let mut sig_rng = rng::stream(cfg.seed, 1);
    let expr_sig: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.n_genes).map(|_| -rng::u01(&mut sig_rng).ln()).collect())
        .collect();
    let mut img_rng = rng::stream(cfg.seed, 2);
    // Class identity lives in the signature direction, not its magnitude:
    // norms are equalized so image feature norms carry no class signal.
    let img_sig: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..cfg.feat_dim).map(|_| rng::gaussian(&mut img_rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = IMG_SCALE * (cfg.feat_dim as f64).sqrt() / norm;
            for x in &mut v {
                *x *= scale;
            }
            v
        })
        .collect();
    // A tenth of the genes are rare: their keep probability is cut to 8%,
    // giving the e_overlap_hvg filter something to remove.
    let mut rare_rng = rng::stream(cfg.seed, 3);
    let rarity: Vec<f64> =
        (0..cfg.n_genes).map(|_| if rng::u01(&mut rare_rng) < 0.10 { 0.08 } else { 1.0 }).collect();

    let side = (cfg.spots_per_slide as f64).sqrt().ceil().max(1.0) as usize;
    let h = cfg.hierarchy_strength;
    let mut spots = Vec::with_capacity(cfg.n_slides * cfg.spots_per_slide);
    for slide in 0..cfg.n_slides {
        let mut r = rng::stream(cfg.seed, 1000 + slide as u64);
        for i in 0..cfg.spots_per_slide {
            let class = rng::below(&mut r, cfg.n_classes) as u32;
            let spec = class_specificity(class, cfg.n_classes);
            let activity = h * spec + (1.0 - h) * rng::u01(&mut r);
            let keep_p = 0.05 + 0.55 * activity;
            let mut expr = vec![0.0; cfg.n_genes];
            for (g, e) in expr.iter_mut().enumerate() {
                if rng::u01(&mut r) < keep_p * rarity[g] {
                    *e = expr_sig[class as usize][g] * (0.5 + rng::u01(&mut r)) * EXPR_SCALE;
                }
            }
            let image_feat: Vec<f64> = img_sig[class as usize]
                .iter()
                .map(|s| s + IMG_SCALE * 0.8 * rng::gaussian(&mut r))
                .collect();
            let radius = 30.0 + 90.0 * rng::u01(&mut r);
            let ngec = compute_ngec(&expr);
            spots.push(Spot {
                spot_id: format!("s{slide}_p{i}"),
                slide_id: format!("slide{slide}"),
                expr,
                image_feat,
                ngec,
                label: Some(class),
                x: (i % side) as f64,
                y: (i / side) as f64,
                radius,
            });
        }
    }
    Dataset {
        gene_names: (0..cfg.n_genes).map(|g| format!("g{g}")).collect(),
        feat_dim: cfg.feat_dim,
        spots,
    }
}

fn parse_cell(file: &str, line: usize, column: usize, cell: &str) -> Result<f64, DataError> {
    let v: f64 = cell
        .parse()
        .map_err(|_| cell_err(file, line, column, format!("expected a number, got '{cell}'")))?;
    if !v.is_finite() {
        return Err(cell_err(file, line, column, "non-finite value"));
    }
    Ok(v)
}

/// Write the three dataset files into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(&dir.display().to_string(), e))?;
    let write = |name: &str, content: String| -> Result<(), DataError> {
        std::fs::write(dir.join(name), content).map_err(|e| io_err(name, e))
    };

    let mut expr = String::from("spot_id");
    for g in &ds.gene_names {
        let _ = write!(expr, "\t{g}");
    }
    expr.push('\n');
    for s in &ds.spots {
        expr.push_str(&s.spot_id);
        for v in &s.expr {
            let _ = write!(expr, "\t{v}");
        }
        expr.push('\n');
    }
    write(EXPRESSION_FILE, expr)?;

    let mut feat = String::new();
    for s in &ds.spots {
        feat.push_str(&s.spot_id);
        for v in &s.image_feat {
            let _ = write!(feat, "\t{v}");
        }
        feat.push('\n');
    }
    write(FEATURES_FILE, feat)?;

    let mut meta = String::from("spot_id\tslide_id\tx\ty\tradius\tlabel\n");
    for s in &ds.spots {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            meta,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.spot_id, s.slide_id, s.x, s.y, s.radius, label
        );
    }
    write(METADATA_FILE, meta)
}

struct MetaRow {
    slide_id: String,
    x: f64,
    y: f64,
    radius: f64,
    label: Option<u32>,
}

/// Load the three dataset files from `dir`. Spot order follows the
/// expression file; NGEC is recomputed from the full expression vector.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let read = |name: &str| -> Result<String, DataError> {
        std::fs::read_to_string(dir.join(name))
            .map_err(|e| io_err(&dir.join(name).display().to_string(), e))
    };

    // Expression: header row names the genes, then one spot per row.
    let text = read(EXPRESSION_FILE)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| cell_err(EXPRESSION_FILE, 1, 1, "empty file"))?;
    let head: Vec<&str> = header.split('\t').collect();
    if head.first() != Some(&"spot_id") {
        return Err(cell_err(EXPRESSION_FILE, 1, 1, "header must start with 'spot_id'"));
    }
    let gene_names: Vec<String> = head[1..].iter().map(|s| s.to_string()).collect();
    if gene_names.is_empty() {
        return Err(cell_err(EXPRESSION_FILE, 1, 2, "no gene columns"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut expr_rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (li, line) in lines {
        let ln = li + 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != gene_names.len() + 1 {
            return Err(cell_err(
                EXPRESSION_FILE,
                ln,
                cells.len().min(gene_names.len() + 1),
                format!("expected {} columns, got {}", gene_names.len() + 1, cells.len()),
            ));
        }
        let id = cells[0].to_string();
        if id.is_empty() {
            return Err(cell_err(EXPRESSION_FILE, ln, 1, "empty spot id"));
        }
        let mut row = Vec::with_capacity(gene_names.len());
        for (ci, cell) in cells[1..].iter().enumerate() {
            let v = parse_cell(EXPRESSION_FILE, ln, ci + 2, cell)?;
            if v < 0.0 {
                return Err(cell_err(
                    EXPRESSION_FILE,
                    ln,
                    ci + 2,
                    format!("negative expression value {v}"),
                ));
            }
            row.push(v);
        }
        if expr_rows.insert(id.clone(), row).is_some() {
            return Err(cell_err(EXPRESSION_FILE, ln, 1, format!("duplicate spot id '{id}'")));
        }
        order.push(id);
    }
    if order.is_empty() {
        return Err(cell_err(EXPRESSION_FILE, 1, 1, "no spot rows"));
    }

    // Features: no header; width fixed by the first row.
    let text = read(FEATURES_FILE)?;
    let mut feat_rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut feat_dim: Option<usize> = None;
    for (li, line) in text.lines().enumerate() {
        let ln = li + 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() < 2 {
            return Err(cell_err(FEATURES_FILE, ln, 1, "expected spot_id plus feature columns"));
        }
        let dim = *feat_dim.get_or_insert(cells.len() - 1);
        if cells.len() - 1 != dim {
            return Err(cell_err(
                FEATURES_FILE,
                ln,
                cells.len().min(dim + 1),
                format!("expected {} feature columns, got {}", dim, cells.len() - 1),
            ));
        }
        let mut row = Vec::with_capacity(dim);
        for (ci, cell) in cells[1..].iter().enumerate() {
            row.push(parse_cell(FEATURES_FILE, ln, ci + 2, cell)?);
        }
        if feat_rows.insert(cells[0].to_string(), row).is_some() {
            return Err(cell_err(
                FEATURES_FILE,
                ln,
                1,
                format!("duplicate spot id '{}'", cells[0]),
            ));
        }
    }

    // Metadata: fixed header.
    let text = read(METADATA_FILE)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| cell_err(METADATA_FILE, 1, 1, "empty file"))?;
    let expect_header = "spot_id\tslide_id\tx\ty\tradius\tlabel";
    if header != expect_header {
        return Err(cell_err(
            METADATA_FILE,
            1,
            1,
            format!("header must be '{}'", expect_header.replace('\t', " ")),
        ));
    }
    let mut meta_rows: BTreeMap<String, MetaRow> = BTreeMap::new();
    for (li, line) in lines {
        let ln = li + 1;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 6 {
            return Err(cell_err(
                METADATA_FILE,
                ln,
                cells.len().min(6),
                format!("expected 6 columns, got {}", cells.len()),
            ));
        }
        let x = parse_cell(METADATA_FILE, ln, 3, cells[2])?;
        let y = parse_cell(METADATA_FILE, ln, 4, cells[3])?;
        let radius = parse_cell(METADATA_FILE, ln, 5, cells[4])?;
        if radius <= 0.0 {
            return Err(cell_err(
                METADATA_FILE,
                ln,
                5,
                format!("radius must be positive, got {radius}"),
            ));
        }
        let label = if cells[5].is_empty() {
            None
        } else {
            Some(cells[5].parse::<u32>().map_err(|_| {
                cell_err(
                    METADATA_FILE,
                    ln,
                    6,
                    format!("label must be a non-negative integer, got '{}'", cells[5]),
                )
            })?)
        };
        let row = MetaRow { slide_id: cells[1].to_string(), x, y, radius, label };
        if cells[1].is_empty() {
            return Err(cell_err(METADATA_FILE, ln, 2, "empty slide id"));
        }
        if meta_rows.insert(cells[0].to_string(), row).is_some() {
            return Err(cell_err(
                METADATA_FILE,
                ln,
                1,
                format!("duplicate spot id '{}'", cells[0]),
            ));
        }
    }

    // Join on spot id; every file must cover exactly the same set.
    for (name, ids) in [
        (FEATURES_FILE, feat_rows.keys().cloned().collect::<Vec<_>>()),
        (METADATA_FILE, meta_rows.keys().cloned().collect::<Vec<_>>()),
    ] {
        for id in &order {
            if !ids.contains(id) {
                return Err(DataError::Schema(format!("spot '{id}' missing from {name}")));
            }
        }
        if ids.len() != order.len() {
            let extra =
                ids.iter().find(|id| !expr_rows.contains_key(*id)).cloned().unwrap_or_default();
            return Err(DataError::Schema(format!(
                "{name} has {} spots but {EXPRESSION_FILE} has {} (e.g. '{extra}')",
                ids.len(),
                order.len()
            )));
        }
    }

    let feat_dim = feat_dim.expect("spot set is non-empty");
    let mut spots = Vec::with_capacity(order.len());
    for id in order {
        let expr = expr_rows.remove(&id).unwrap();
        let image_feat = feat_rows.remove(&id).unwrap();
        let meta = meta_rows.remove(&id).unwrap();
        let ngec = compute_ngec(&expr);
        spots.push(Spot {
            spot_id: id,
            slide_id: meta.slide_id,
            expr,
            image_feat,
            ngec,
            label: meta.label,
            x: meta.x,
            y: meta.y,
            radius: meta.radius,
        });
    }
    Ok(Dataset { gene_names, feat_dim, spots })
}
