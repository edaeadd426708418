//! Evaluation on frozen embeddings: dataset embedding, linear probing
//! with stratified splits and macro-F1, rank correlation, and hierarchy
//! diagnostics (NGEC vs norm, violation rate, aperture histogram).

use crate::autodiff::Tape;
use crate::data::{encoder_inputs, DataError, Dataset, GenePanel};
use crate::encoders::{encode_gene, encode_image, GeneEncoder, ImageProjector};
use crate::lorentz::{half_aperture, ConeConstants, Curvature, HyperPoint};
use crate::losses::{violation_rate, BatchEmbeddings};
use crate::rng;
use thiserror::Error;

pub const APERTURE_HIST_BINS: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no labeled spots")]
    NoLabeledSpots,
    #[error("fewer than two classes present in the labels")]
    TooFewClasses,
    #[error("label {label} is outside the configured class count {n_classes}")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("class {class} is absent from the training split")]
    ClassMissing { class: u32 },
    #[error("split for seed {seed} leaves the {split} set empty; need more samples")]
    EmptySplit { seed: u64, split: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Gene,
    Image,
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gene" => Ok(Modality::Gene),
            "image" => Ok(Modality::Image),
            other => Err(format!("unknown modality '{other}' (expected gene or image)")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Gene => "gene",
            Modality::Image => "image",
        })
    }
}

/// Which coordinates each embedding row carries. Space is the default:
/// the time coordinate is a function of the space norm and adds nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Components {
    #[default]
    Space,
    Full,
}

impl std::str::FromStr for Components {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "space" => Ok(Components::Space),
            "full" => Ok(Components::Full),
            other => Err(format!("unknown components '{other}' (expected space or full)")),
        }
    }
}

impl std::fmt::Display for Components {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Components::Space => "space",
            Components::Full => "full",
        })
    }
}

/// Midranks (average rank for ties), 1-based.
fn midranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("midranks: non-finite value"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the tie; assign their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Tie-corrected Spearman rank correlation: Pearson correlation of
/// midranks. `None` when either side is constant (undefined correlation).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman: length mismatch");
    assert!(x.len() >= 2, "spearman: need at least two observations");
    let rx = midranks(x);
    let ry = midranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Embedding rows for the labeled spots, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub rows: Vec<Vec<f64>>,
    pub spot_ids: Vec<String>,
    pub labels: Vec<u32>,
    pub ngec: Vec<u64>,
}

fn point_row(p: &HyperPoint, components: Components) -> Vec<f64> {
    match components {
        Components::Space => p.space.clone(),
        Components::Full => {
            let mut row = p.space.clone();
            row.push(p.time);
            row
        }
    }
}

/// Embed every labeled spot with the chosen modality's encoder.
pub fn embed_dataset(
    gene: &GeneEncoder,
    proj: &ImageProjector,
    ds: &Dataset,
    panel: &GenePanel,
    modality: Modality,
    components: Components,
    c: Curvature,
) -> Result<Embedded, EvalError> {
    let labeled: Vec<usize> =
        (0..ds.spots.len()).filter(|&i| ds.spots[i].label.is_some()).collect();
    if labeled.is_empty() {
        return Err(EvalError::NoLabeledSpots);
    }
    let gene_rows = match modality {
        Modality::Gene => Some(encoder_inputs(ds, panel)?),
        Modality::Image => None,
    };
    let mut rows = Vec::with_capacity(labeled.len());
    for &i in &labeled {
        let point = match modality {
            Modality::Gene => encode_gene(gene, &gene_rows.as_ref().unwrap()[i], c),
            Modality::Image => encode_image(proj, &ds.spots[i].image_feat, c),
        };
        rows.push(point_row(&point, components));
    }
    Ok(Embedded {
        rows,
        spot_ids: labeled.iter().map(|&i| ds.spots[i].spot_id.clone()).collect(),
        labels: labeled.iter().map(|&i| ds.spots[i].label.unwrap()).collect(),
        ngec: labeled.iter().map(|&i| ds.spots[i].ngec).collect(),
    })
}

/// Linear probe settings. Split ratios are fixed at 8:1:1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub n_classes: usize,
    pub n_seeds: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub base_seed: u64,
}

impl ProbeConfig {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, n_seeds: 5, epochs: 250, lr: 0.5, patience: 30, base_seed: 0 }
    }
}

/// Per-seed test macro-F1 with the sample mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl ProbeReport {
    fn from_scores(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let sd = if per_seed.len() > 1 {
            (per_seed.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { per_seed, mean, sd }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("seed\tmacro_f1\n");
        for (s, f1) in self.per_seed.iter().enumerate() {
            out.push_str(&format!("{s}\t{f1}\n"));
        }
        out.push_str(&format!("mean\t{}\n", self.mean));
        out.push_str(&format!("sd\t{}\n", self.sd));
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "linear probe over {} seeds: macro-F1 {:.4} ± {:.4} (per seed: {})",
            self.per_seed.len(),
            self.mean,
            self.sd,
            self.per_seed.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(", ")
        )
    }
}

/// Macro-averaged F1 over the classes present in `y_true`.
pub fn macro_f1(y_true: &[u32], y_pred: &[u32], n_classes: usize) -> f64 {
    assert_eq!(y_true.len(), y_pred.len(), "macro_f1: length mismatch");
    assert!(!y_true.is_empty(), "macro_f1: empty evaluation set");
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fnn[t as usize] += 1;
        }
    }
    let mut present = vec![false; n_classes];
    for &t in y_true {
        present[t as usize] = true;
    }
    let mut total = 0.0;
    let mut count = 0;
    for cl in 0..n_classes {
        if !present[cl] {
            continue;
        }
        let p_den = tp[cl] + fp[cl];
        let r_den = tp[cl] + fnn[cl];
        let precision = if p_den > 0 { tp[cl] as f64 / p_den as f64 } else { 0.0 };
        let recall = if r_den > 0 { tp[cl] as f64 / r_den as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
        count += 1;
    }
    total / count as f64
}

/// Deterministic stratified 8:1:1 split: per class, a seeded shuffle and a
/// largest-remainder allocation (ties favor train, then validation).
fn stratified_split(
    labels: &[u32],
    n_classes: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, 3000);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for cl in 0..n_classes as u32 {
        let mut idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cl).collect();
        if idxs.is_empty() {
            continue;
        }
        rng::shuffle(&mut r, &mut idxs);
        let n = idxs.len() as f64;
        let fracs = [0.8, 0.1, 0.1];
        let mut counts: Vec<usize> = fracs.iter().map(|f| (f * n).floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut remainders: Vec<(f64, usize)> =
            fracs.iter().enumerate().map(|(s, f)| (f * n - (f * n).floor(), s)).collect();
        // Largest remainder first; equal remainders resolve in split order.
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for k in 0..idxs.len() - assigned {
            counts[remainders[k % 3].1] += 1;
        }
        let (t, rest) = idxs.split_at(counts[0]);
        let (v, te) = rest.split_at(counts[1]);
        train.extend_from_slice(t);
        val.extend_from_slice(v);
        test.extend_from_slice(te);
    }
    (train, val, test)
}

fn predict(w: &[f64], b: &[f64], row: &[f64], n_classes: usize) -> u32 {
    let mut best = 0u32;
    let mut best_score = f64::NEG_INFINITY;
    for cl in 0..n_classes {
        let mut s = b[cl];
        for (j, &x) in row.iter().enumerate() {
            s += x * w[j * n_classes + cl];
        }
        if s > best_score {
            best_score = s;
            best = cl as u32;
        }
    }
    best
}

fn eval_f1(
    w: &[f64],
    b: &[f64],
    rows: &[Vec<f64>],
    labels: &[u32],
    idxs: &[usize],
    n_classes: usize,
) -> f64 {
    let y_true: Vec<u32> = idxs.iter().map(|&i| labels[i]).collect();
    let y_pred: Vec<u32> = idxs.iter().map(|&i| predict(w, b, &rows[i], n_classes)).collect();
    macro_f1(&y_true, &y_pred, n_classes)
}

/// Multinomial logistic regression on frozen embeddings: full-batch
/// gradient descent from zero weights, early stopping on validation
/// macro-F1, test macro-F1 per seed, aggregated mean ± SD.
pub fn linear_probe(
    rows: &[Vec<f64>],
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    assert_eq!(rows.len(), labels.len(), "probe: row/label count mismatch");
    assert!(cfg.n_seeds >= 1, "probe: n_seeds must be positive");
    assert!(cfg.lr > 0.0 && cfg.epochs >= 1, "probe: lr and epochs must be positive");
    for &l in labels {
        if l as usize >= cfg.n_classes {
            return Err(EvalError::LabelOutOfRange { label: l, n_classes: cfg.n_classes });
        }
    }
    let mut present: Vec<u32> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(EvalError::TooFewClasses);
    }
    let d = rows.first().map(|r| r.len()).expect("probe: empty dataset");
    assert!(rows.iter().all(|r| r.len() == d), "probe: ragged embedding rows");
    let c = cfg.n_classes;

    let mut per_seed = Vec::with_capacity(cfg.n_seeds);
    for s in 0..cfg.n_seeds {
        let seed = cfg.base_seed + s as u64;
        let (train, val, test) = stratified_split(labels, c, seed);
        for &cl in &present {
            if !train.iter().any(|&i| labels[i] == cl) {
                return Err(EvalError::ClassMissing { class: cl });
            }
        }
        if test.is_empty() {
            return Err(EvalError::EmptySplit { seed, split: "test" });
        }

        let x_flat: Vec<f64> = train.iter().flat_map(|&i| rows[i].iter().cloned()).collect();
        let gather_idx: Vec<usize> =
            train.iter().enumerate().map(|(r, &i)| r * c + labels[i] as usize).collect();
        let t = train.len();
        let mut w = vec![0.0; d * c];
        let mut b = vec![0.0; c];
        let mut best = (w.clone(), b.clone());
        let mut best_f1 = f64::NEG_INFINITY;
        let mut since_best = 0;
        for _ in 0..cfg.epochs {
            let mut tape = Tape::new();
            let wt = tape.leaf(d, c, w.clone(), true);
            let bt = tape.leaf(1, c, b.clone(), true);
            let xt = tape.leaf(t, d, x_flat.clone(), false);
            let scores = tape.matmul(xt, wt);
            let logits = tape.add_row_broadcast(scores, bt);
            let lse = tape.row_logsumexp(logits);
            let correct = tape.gather(logits, gather_idx.clone());
            let per_row = tape.sub(lse, correct);
            let total = tape.sum(per_row);
            let loss = tape.mul_const(total, 1.0 / t as f64);
            tape.backward(loss);
            for (p, g) in w.iter_mut().zip(tape.grad(wt)) {
                *p -= cfg.lr * g;
            }
            for (p, g) in b.iter_mut().zip(tape.grad(bt)) {
                *p -= cfg.lr * g;
            }
            if !val.is_empty() {
                let f1 = eval_f1(&w, &b, rows, labels, &val, c);
                if f1 > best_f1 {
                    best_f1 = f1;
                    best = (w.clone(), b.clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best > cfg.patience {
                        break;
                    }
                }
            }
        }
        if val.is_empty() {
            best = (w, b);
        }
        per_seed.push(eval_f1(&best.0, &best.1, rows, labels, &test, c));
    }
    Ok(ProbeReport::from_scores(per_seed))
}

/// Hierarchy diagnostics over every spot: Spearman(NGEC, space norm) per
/// modality (`None` when undefined), pair violation rate, and per-modality
/// aperture histograms over [0, π/2].
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyReport {
    pub spearman_gene: Option<f64>,
    pub spearman_image: Option<f64>,
    pub violation_rate: f64,
    pub aperture_hist_gene: Vec<u64>,
    pub aperture_hist_image: Vec<u64>,
}

impl HierarchyReport {
    pub fn summary(&self) -> String {
        let fmt = |s: Option<f64>| match s {
            Some(v) => format!("{v:.4}"),
            None => "n/a (constant input)".to_string(),
        };
        let hist = |h: &[u64]| h.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "spearman(ngec, ||space||) gene: {}\nspearman(ngec, ||space||) image: {}\n\
             pair violation rate: {:.4}\naperture histogram gene  [0, pi/2]: {}\n\
             aperture histogram image [0, pi/2]: {}",
            fmt(self.spearman_gene),
            fmt(self.spearman_image),
            self.violation_rate,
            hist(&self.aperture_hist_gene),
            hist(&self.aperture_hist_image),
        )
    }
}

fn aperture_histogram(points: &[HyperPoint], k: ConeConstants, c: Curvature) -> Vec<u64> {
    let mut hist = vec![0u64; APERTURE_HIST_BINS];
    let width = std::f64::consts::FRAC_PI_2 / APERTURE_HIST_BINS as f64;
    for p in points {
        let a = half_aperture(p, k, c);
        let bin = ((a / width) as usize).min(APERTURE_HIST_BINS - 1);
        hist[bin] += 1;
    }
    hist
}

pub fn hierarchy_diagnostics(
    gene: &GeneEncoder,
    proj: &ImageProjector,
    ds: &Dataset,
    panel: &GenePanel,
    k: ConeConstants,
    c: Curvature,
) -> Result<HierarchyReport, EvalError> {
    if ds.spots.is_empty() {
        return Err(EvalError::Data(DataError::Schema("cannot diagnose an empty dataset".into())));
    }
    let gene_rows = encoder_inputs(ds, panel)?;
    let gene_points: Vec<HyperPoint> = gene_rows.iter().map(|r| encode_gene(gene, r, c)).collect();
    let image_points: Vec<HyperPoint> =
        ds.spots.iter().map(|s| encode_image(proj, &s.image_feat, c)).collect();
    let ngec: Vec<f64> = ds.spots.iter().map(|s| s.ngec as f64).collect();
    let gene_norms: Vec<f64> = gene_points.iter().map(|p| p.space_norm()).collect();
    let image_norms: Vec<f64> = image_points.iter().map(|p| p.space_norm()).collect();
    let batch = BatchEmbeddings::new(
        image_points.clone(),
        gene_points.clone(),
        ds.spots.iter().map(|s| s.ngec).collect(),
    );
    Ok(HierarchyReport {
        spearman_gene: spearman(&ngec, &gene_norms),
        spearman_image: spearman(&ngec, &image_norms),
        violation_rate: violation_rate(&batch, k, c),
        aperture_hist_gene: aperture_histogram(&gene_points, k, c),
        aperture_hist_image: aperture_histogram(&image_points, k, c),
    })
}
