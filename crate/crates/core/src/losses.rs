//! The three training losses over a batch of paired hyperbolic embeddings:
//! an image-anchored contrastive term, a cross-modal entailment term
//! (each gene embedding's cone should contain its image embedding), and an
//! intra-modal entailment term (low-NGEC spots should have wider cones
//! than high-NGEC spots, per modality).
//!
//! Every pure kernel here performs the same floating-point operations in
//! the same order as its tape counterpart in [`diff`], so the two routes
//! agree to the last bit; tests pin that parity.

use crate::autodiff::NORM_FLOOR;
use crate::lorentz::{
    cone_violation, half_aperture, lorentz_inner, ConeConstants, Curvature, HyperPoint,
};

/// Similarity used inside the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimMode {
    /// Cosine over the full (n+1)-dimensional hyperboloid vectors.
    #[default]
    CosineFull,
    /// Cosine over the spatial components only.
    CosineSpace,
    /// Negative Lorentzian geodesic distance.
    NegLorentzDistance,
}

impl SimMode {
    pub fn name(&self) -> &'static str {
        match self {
            SimMode::CosineFull => "cosine-full",
            SimMode::CosineSpace => "cosine-space",
            SimMode::NegLorentzDistance => "neg-lorentz-distance",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine-full" => Ok(SimMode::CosineFull),
            "cosine-space" => Ok(SimMode::CosineSpace),
            "neg-lorentz-distance" => Ok(SimMode::NegLorentzDistance),
            other => Err(format!(
                "unknown sim mode '{other}' (expected cosine-full, cosine-space, or neg-lorentz-distance)"
            )),
        }
    }
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Aligned image/gene embeddings of one batch plus each spot's nonzero
/// gene expression count.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub image_points: Vec<HyperPoint>,
    pub gene_points: Vec<HyperPoint>,
    pub ngec: Vec<u64>,
}

impl BatchEmbeddings {
    pub fn new(
        image_points: Vec<HyperPoint>,
        gene_points: Vec<HyperPoint>,
        ngec: Vec<u64>,
    ) -> Self {
        assert_eq!(image_points.len(), gene_points.len(), "batch: modality count mismatch");
        assert_eq!(image_points.len(), ngec.len(), "batch: ngec count mismatch");
        #[cfg(debug_assertions)]
        for p in image_points.iter().chain(&gene_points) {
            debug_assert!(
                p.time.is_finite() && p.time > 0.0,
                "batch point off the upper hyperboloid sheet"
            );
        }
        Self { image_points, gene_points, ngec }
    }

    pub fn len(&self) -> usize {
        self.image_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_points.is_empty()
    }
}

/// Loss combination weights: λ scales the cross-modal term, β the
/// intra-modal term; τ is the contrastive temperature and q the per-tail
/// NGEC selection count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub q: usize,
}

impl LossWeights {
    pub fn new(lambda: f64, beta: f64, tau: f64, q: usize) -> Self {
        assert!(tau > 0.0, "tau must be positive");
        assert!(q >= 1, "q must be at least 1");
        Self { lambda, beta, tau, q }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.1, beta: 0.1, tau: 0.07, q: 150 }
    }
}

/// Every term of the combined loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cont: f64,
    pub l_ent_cross: f64,
    pub l_ent_intra_gene: f64,
    pub l_ent_intra_image: f64,
    pub l_ent_intra: f64,
    pub l_final: f64,
}

fn full_norm(u: &HyperPoint) -> f64 {
    (u.space.iter().map(|x| x * x).sum::<f64>() + u.time * u.time).sqrt()
}

/// Cosine over the full (n+1)-dim vectors, each normalized with its norm
/// floored at `NORM_FLOOR`; the time coordinate participates last.
fn cosine_full(u: &HyperPoint, v: &HyperPoint) -> f64 {
    let nu = full_norm(u).max(NORM_FLOOR);
    let nv = full_norm(v).max(NORM_FLOOR);
    let mut s: f64 = u.space.iter().zip(&v.space).map(|(a, b)| (a / nu) * (b / nv)).sum();
    s += (u.time / nu) * (v.time / nv);
    s
}

fn cosine_space(u: &HyperPoint, v: &HyperPoint) -> f64 {
    let nu = u.space_norm().max(NORM_FLOOR);
    let nv = v.space_norm().max(NORM_FLOOR);
    u.space.iter().zip(&v.space).map(|(a, b)| (a / nu) * (b / nv)).sum()
}

fn neg_lorentz_distance(u: &HyperPoint, v: &HyperPoint, c: Curvature) -> f64 {
    let x = lorentz_inner(u, v) * (-c.value());
    x.max(1.0).acosh() * (-1.0 / c.sqrt())
}

/// Pairwise similarity under the given mode.
pub fn similarity(u: &HyperPoint, v: &HyperPoint, mode: SimMode, c: Curvature) -> f64 {
    match mode {
        SimMode::CosineFull => cosine_full(u, v),
        SimMode::CosineSpace => cosine_space(u, v),
        SimMode::NegLorentzDistance => neg_lorentz_distance(u, v, c),
    }
}

/// One direction of the InfoNCE softmax: `anchors` index the rows, the
/// denominator runs over `others`, positives sit on the diagonal.
fn anchored_contrastive(
    anchors: &[HyperPoint],
    others: &[HyperPoint],
    tau: f64,
    mode: SimMode,
    c: Curvature,
) -> f64 {
    let n = anchors.len();
    let inv_tau = 1.0 / tau;
    let mut total = 0.0;
    let mut row = vec![0.0; n];
    for i in 0..n {
        for (j, o) in others.iter().enumerate() {
            row[j] = similarity(&anchors[i], o, mode, c) * inv_tau;
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total * (1.0 / n as f64)
}

/// Image-anchored contrastive loss: softmax over gene candidates per image,
/// log-sum-exp stabilized. Always ≥ 0; equals ln N when all similarities
/// are equal.
pub fn contrastive_loss(batch: &BatchEmbeddings, tau: f64, mode: SimMode, c: Curvature) -> f64 {
    assert!(!batch.is_empty(), "contrastive_loss: empty batch");
    assert!(tau > 0.0, "contrastive_loss: tau must be positive");
    anchored_contrastive(&batch.image_points, &batch.gene_points, tau, mode, c)
}

/// Symmetrized variant: average of the image-anchored and gene-anchored
/// directions. Off by default.
pub fn contrastive_loss_symmetric(
    batch: &BatchEmbeddings,
    tau: f64,
    mode: SimMode,
    c: Curvature,
) -> f64 {
    assert!(!batch.is_empty(), "contrastive_loss: empty batch");
    assert!(tau > 0.0, "contrastive_loss: tau must be positive");
    let li = anchored_contrastive(&batch.image_points, &batch.gene_points, tau, mode, c);
    let lg = anchored_contrastive(&batch.gene_points, &batch.image_points, tau, mode, c);
    (li + lg) * 0.5
}

/// Cross-modal entailment loss: mean cone violation of each aligned pair,
/// with the cone rooted at the gene embedding. Pairs only, no cross terms.
pub fn cmel_loss(batch: &BatchEmbeddings, k: ConeConstants, c: Curvature) -> f64 {
    assert!(!batch.is_empty(), "cmel_loss: empty batch");
    let mut total = 0.0;
    for (g, i) in batch.gene_points.iter().zip(&batch.image_points) {
        total += cone_violation(g, i, k, c);
    }
    total * (1.0 / batch.len() as f64)
}

/// Fraction of aligned pairs whose cone violation is strictly positive.
pub fn violation_rate(batch: &BatchEmbeddings, k: ConeConstants, c: Curvature) -> f64 {
    assert!(!batch.is_empty(), "violation_rate: empty batch");
    let violated = batch
        .gene_points
        .iter()
        .zip(&batch.image_points)
        .filter(|(g, i)| cone_violation(g, i, k, c) > 0.0)
        .count();
    violated as f64 / batch.len() as f64
}

/// Indices of the q lowest- and q highest-NGEC spots, ties broken by
/// ascending spot index. Sorted ascending by (ngec, index); L is the first
/// q ranks, H the last q.
pub(crate) fn select_by_ngec(ngec: &[u64], q: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(q >= 1, "selection: q must be at least 1");
    assert!(2 * q <= ngec.len(), "selection: 2q must not exceed the batch size");
    let mut order: Vec<usize> = (0..ngec.len()).collect();
    order.sort_by_key(|&i| (ngec[i], i));
    let l = order[..q].to_vec();
    let h = order[ngec.len() - q..].to_vec();
    (l, h)
}

/// Low-/high-NGEC index sets of a batch (L first, H second).
pub fn select_hngec_lngec(batch: &BatchEmbeddings, q: usize) -> (Vec<usize>, Vec<usize>) {
    select_by_ngec(&batch.ngec, q)
}

fn imel_modality(
    points: &[HyperPoint],
    l: &[usize],
    h: &[usize],
    k: ConeConstants,
    c: Curvature,
) -> f64 {
    let q = l.len();
    let aper_l: Vec<f64> = l.iter().map(|&i| half_aperture(&points[i], k, c)).collect();
    let aper_h: Vec<f64> = h.iter().map(|&j| half_aperture(&points[j], k, c)).collect();
    let mut total = 0.0;
    for al in &aper_l {
        for ah in &aper_h {
            total += (ah - al).max(0.0);
        }
    }
    total * (1.0 / ((q * q) as f64))
}

/// Intra-modal entailment loss: within each modality, every high-NGEC
/// aperture should be at most every low-NGEC aperture. Returns
/// (gene term, image term, their average).
pub fn imel_loss(
    batch: &BatchEmbeddings,
    q: usize,
    k: ConeConstants,
    c: Curvature,
) -> (f64, f64, f64) {
    let (l, h) = select_by_ngec(&batch.ngec, q);
    let gene = imel_modality(&batch.gene_points, &l, &h, k, c);
    let image = imel_modality(&batch.image_points, &l, &h, k, c);
    (gene, image, (gene + image) * 0.5)
}

/// All loss terms and their weighted combination:
/// `l_final = l_cont + λ·l_ent_cross + β·l_ent_intra`.
pub fn final_loss(
    batch: &BatchEmbeddings,
    weights: &LossWeights,
    mode: SimMode,
    symmetric: bool,
    k: ConeConstants,
    c: Curvature,
) -> LossBreakdown {
    let l_cont = if symmetric {
        contrastive_loss_symmetric(batch, weights.tau, mode, c)
    } else {
        contrastive_loss(batch, weights.tau, mode, c)
    };
    let l_ent_cross = cmel_loss(batch, k, c);
    let (l_ent_intra_gene, l_ent_intra_image, l_ent_intra) = imel_loss(batch, weights.q, k, c);
    let l_final = (l_cont + weights.lambda * l_ent_cross) + weights.beta * l_ent_intra;
    LossBreakdown { l_cont, l_ent_cross, l_ent_intra_gene, l_ent_intra_image, l_ent_intra, l_final }
}

/// Tape builders assembling the same losses over lifted batches, for
/// training. Values agree with the pure kernels to the last bit.
pub mod diff {
    use super::{select_by_ngec, LossWeights, SimMode};
    use crate::autodiff::{Tape, Tensor};
    use crate::lorentz::diff::{aperture_col, cone_violation_pair, LiftedBatch};
    use crate::lorentz::{ConeConstants, Curvature};

    /// Tape handles to every loss term. Disabled terms are constant zeros
    /// and contribute neither value nor gradient.
    #[derive(Debug, Clone, Copy)]
    pub struct DiffLosses {
        pub l_cont: Tensor,
        pub l_ent_cross: Tensor,
        pub l_ent_intra_gene: Tensor,
        pub l_ent_intra_image: Tensor,
        pub l_ent_intra: Tensor,
        pub l_final: Tensor,
    }

    /// N×N similarity matrix with `anchors` on the rows.
    pub fn sim_matrix(
        tape: &mut Tape,
        anchors: &LiftedBatch,
        others: &LiftedBatch,
        mode: SimMode,
        c: Curvature,
    ) -> Tensor {
        match mode {
            SimMode::CosineFull => {
                let na = tape.row_normalize(anchors.full);
                let no = tape.row_normalize(others.full);
                tape.matmul_nt(na, no)
            }
            SimMode::CosineSpace => {
                let na = tape.row_normalize(anchors.space);
                let no = tape.row_normalize(others.space);
                tape.matmul_nt(na, no)
            }
            SimMode::NegLorentzDistance => {
                let sdot = tape.matmul_nt(anchors.space, others.space);
                let tprod = tape.matmul_nt(anchors.time, others.time);
                let lor = tape.sub(sdot, tprod);
                let x = tape.mul_const(lor, -c.value());
                let d = tape.acosh_clamped(x);
                tape.mul_const(d, -1.0 / c.sqrt())
            }
        }
    }

    fn anchored_contrastive(
        tape: &mut Tape,
        anchors: &LiftedBatch,
        others: &LiftedBatch,
        tau: f64,
        mode: SimMode,
        c: Curvature,
    ) -> Tensor {
        let n = anchors.space.rows();
        let s = sim_matrix(tape, anchors, others, mode, c);
        let logits = tape.mul_const(s, 1.0 / tau);
        let lse = tape.row_logsumexp(logits);
        let pos = tape.diag(logits);
        let per_row = tape.sub(lse, pos);
        let total = tape.sum(per_row);
        tape.mul_const(total, 1.0 / n as f64)
    }

    pub fn contrastive(
        tape: &mut Tape,
        image: &LiftedBatch,
        gene: &LiftedBatch,
        tau: f64,
        mode: SimMode,
        symmetric: bool,
        c: Curvature,
    ) -> Tensor {
        let li = anchored_contrastive(tape, image, gene, tau, mode, c);
        if !symmetric {
            return li;
        }
        let lg = anchored_contrastive(tape, gene, image, tau, mode, c);
        let both = tape.add(li, lg);
        tape.mul_const(both, 0.5)
    }

    /// Mean cone violation over aligned pairs; `aper_gene` must be the
    /// aperture column of the gene batch.
    pub fn cmel(
        tape: &mut Tape,
        gene: &LiftedBatch,
        image: &LiftedBatch,
        aper_gene: Tensor,
        c: Curvature,
    ) -> Tensor {
        let n = gene.space.rows();
        let mut acc = cone_violation_pair(tape, gene, 0, image, 0, aper_gene, c);
        for p in 1..n {
            let v = cone_violation_pair(tape, gene, p, image, p, aper_gene, c);
            acc = tape.add(acc, v);
        }
        tape.mul_const(acc, 1.0 / n as f64)
    }

    /// One modality's intra-modal term from its aperture column and the
    /// L/H index sets.
    pub fn imel_modality(tape: &mut Tape, aper: Tensor, l: &[usize], h: &[usize]) -> Tensor {
        let q = l.len();
        let aper_l = tape.gather_rows(aper, l.to_vec());
        let aper_h = tape.gather_rows(aper, h.to_vec());
        let ones_col = tape.leaf(q, 1, vec![1.0; q], false);
        let ones_row = tape.leaf(1, q, vec![1.0; q], false);
        let h_row = tape.reshape(aper_h, 1, q);
        let m_h = tape.matmul(ones_col, h_row);
        let m_l = tape.matmul(aper_l, ones_row);
        let d = tape.sub(m_h, m_l);
        let hinge = tape.hinge_max0(d);
        let total = tape.sum(hinge);
        tape.mul_const(total, 1.0 / ((q * q) as f64))
    }

    /// Full loss stack over one batch of lifted embeddings. Selection
    /// indices are data (from `ngec`), not differentiated.
    #[allow(clippy::too_many_arguments)]
    pub fn final_loss(
        tape: &mut Tape,
        gene: &LiftedBatch,
        image: &LiftedBatch,
        ngec: &[u64],
        weights: &LossWeights,
        mode: SimMode,
        symmetric: bool,
        k: ConeConstants,
        c: Curvature,
        enable_cmel: bool,
        enable_imel: bool,
    ) -> DiffLosses {
        let n = gene.space.rows();
        assert_eq!(n, image.space.rows(), "final_loss: modality count mismatch");
        assert_eq!(n, ngec.len(), "final_loss: ngec count mismatch");
        let l_cont = contrastive(tape, image, gene, weights.tau, mode, symmetric, c);

        let aper_gene = aperture_col(tape, gene, k, c);
        let l_ent_cross =
            if enable_cmel { cmel(tape, gene, image, aper_gene, c) } else { tape.scalar(0.0) };

        let (l_ent_intra_gene, l_ent_intra_image, l_ent_intra) = if enable_imel {
            let (l, h) = select_by_ngec(ngec, weights.q);
            let aper_image = aperture_col(tape, image, k, c);
            let g = imel_modality(tape, aper_gene, &l, &h);
            let i = imel_modality(tape, aper_image, &l, &h);
            let s = tape.add(g, i);
            let avg = tape.mul_const(s, 0.5);
            (g, i, avg)
        } else {
            let z = tape.scalar(0.0);
            (z, z, z)
        };

        let mut l_final = l_cont;
        if enable_cmel {
            let wc = tape.mul_const(l_ent_cross, weights.lambda);
            l_final = tape.add(l_final, wc);
        }
        if enable_imel {
            let wi = tape.mul_const(l_ent_intra, weights.beta);
            l_final = tape.add(l_final, wi);
        }
        DiffLosses {
            l_cont,
            l_ent_cross,
            l_ent_intra_gene,
            l_ent_intra_image,
            l_ent_intra,
            l_final,
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::{exp_map, TangentVec};
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    // ln(4) to 20 digits (50-digit reference: 1.3862943611198906188...).
    #[allow(clippy::excessive_precision)]
    const LN_4: f64 = 1.3862943611198906188;

    fn c1() -> Curvature {
        Curvature::new(1.0)
    }

    fn lift(tangents: &[Vec<f64>]) -> Vec<HyperPoint> {
        tangents.iter().map(|t| exp_map(&TangentVec::new(t.clone()), c1())).collect()
    }

    fn random_batch(seed: u64, n: usize, dim: usize, scale: f64) -> BatchEmbeddings {
        let mut r = rng::stream(seed, 800);
        let mut draw = |s: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| s * rng::gaussian(&mut r)).collect()).collect()
        };
        let img = lift(&draw(scale));
        let gene = lift(&draw(scale));
        let ngec: Vec<u64> = (0..n).map(|_| rng::below(&mut r, 200) as u64).collect();
        BatchEmbeddings::new(img, gene, ngec)
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let batch =
            BatchEmbeddings::new(lift(&[vec![0.4, 0.2]]), lift(&[vec![-0.1, 0.3]]), vec![5]);
        assert_eq!(contrastive_loss(&batch, 0.07, SimMode::CosineFull, c1()), 0.0);
    }

    #[test]
    fn contrastive_equal_similarities_is_ln_n() {
        // Four identical pairs: every entry of the similarity matrix is the
        // same, so the softmax is uniform.
        let t = vec![0.3, 0.1];
        let batch = BatchEmbeddings::new(
            lift(&[t.clone(), t.clone(), t.clone(), t.clone()]),
            lift(&[t.clone(), t.clone(), t.clone(), t.clone()]),
            vec![1, 2, 3, 4],
        );
        for mode in [SimMode::CosineFull, SimMode::CosineSpace, SimMode::NegLorentzDistance] {
            let l = contrastive_loss(&batch, 0.07, mode, c1());
            assert_abs_diff_eq!(l, LN_4, epsilon = 1e-10);
        }
    }

    #[test]
    fn contrastive_matches_naive_recomputation() {
        // Direct per-element evaluation without the log-sum-exp shift; safe
        // here because the logits are far from overflow.
        let batch = random_batch(11, 3, 4, 0.8);
        let tau = 0.07;
        for mode in [SimMode::CosineFull, SimMode::CosineSpace, SimMode::NegLorentzDistance] {
            let mut naive = 0.0;
            for i in 0..3 {
                let mut denom = 0.0;
                for j in 0..3 {
                    denom +=
                        (similarity(&batch.image_points[i], &batch.gene_points[j], mode, c1())
                            / tau)
                            .exp();
                }
                let pos = (similarity(&batch.image_points[i], &batch.gene_points[i], mode, c1())
                    / tau)
                    .exp();
                naive -= (pos / denom).ln();
            }
            naive /= 3.0;
            let l = contrastive_loss(&batch, tau, mode, c1());
            assert_abs_diff_eq!(l, naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn contrastive_is_nonnegative() {
        for seed in 0..20 {
            let batch = random_batch(seed, 6, 3, 1.0);
            for mode in [SimMode::CosineFull, SimMode::CosineSpace, SimMode::NegLorentzDistance] {
                assert!(contrastive_loss(&batch, 0.07, mode, c1()) >= 0.0);
            }
        }
    }

    #[test]
    fn contrastive_stable_at_extreme_logits() {
        // Opposite unit tangents give space-cosine similarities of exactly
        // ±1: logits ±1/0.07 ≈ ±14.3. The stable kernel must agree with the
        // direct evaluation, which does not overflow at this magnitude.
        let u = vec![0.7, 0.0];
        let negu = vec![-0.7, 0.0];
        let batch = BatchEmbeddings::new(
            lift(&[u.clone(), u.clone()]),
            lift(&[u.clone(), negu.clone()]),
            vec![1, 2],
        );
        let tau = 0.07;
        let l = contrastive_loss(&batch, tau, SimMode::CosineSpace, c1());
        assert!(l.is_finite());
        let mut naive = 0.0;
        for i in 0..2 {
            let mut denom = 0.0;
            for j in 0..2 {
                denom += (similarity(
                    &batch.image_points[i],
                    &batch.gene_points[j],
                    SimMode::CosineSpace,
                    c1(),
                ) / tau)
                    .exp();
            }
            let pos = (similarity(
                &batch.image_points[i],
                &batch.gene_points[i],
                SimMode::CosineSpace,
                c1(),
            ) / tau)
                .exp();
            naive -= (pos / denom).ln();
        }
        naive /= 2.0;
        assert_abs_diff_eq!(l, naive, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_variant_averages_both_directions() {
        let batch = random_batch(13, 5, 3, 0.9);
        let li = contrastive_loss(&batch, 0.07, SimMode::CosineFull, c1());
        let swapped = BatchEmbeddings::new(
            batch.gene_points.clone(),
            batch.image_points.clone(),
            batch.ngec.clone(),
        );
        let lg = contrastive_loss(&swapped, 0.07, SimMode::CosineFull, c1());
        let sym = contrastive_loss_symmetric(&batch, 0.07, SimMode::CosineFull, c1());
        assert_abs_diff_eq!(sym, (li + lg) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cmel_zero_when_every_pair_satisfied() {
        // Genes near the origin have near-maximal cones; images on the same
        // rays sit inside them.
        let genes = lift(&[vec![0.1, 0.0], vec![0.0, 0.12]]);
        let images = lift(&[vec![0.5, 0.0], vec![0.0, 0.6]]);
        let batch = BatchEmbeddings::new(images, genes, vec![1, 2]);
        assert_eq!(cmel_loss(&batch, ConeConstants::default(), c1()), 0.0);
        assert_eq!(violation_rate(&batch, ConeConstants::default(), c1()), 0.0);
    }

    #[test]
    fn cmel_is_mean_of_pair_violations() {
        let k = ConeConstants::default();
        let batch = random_batch(17, 8, 4, 1.1);
        let mut expected = 0.0;
        for p in 0..8 {
            expected += cone_violation(&batch.gene_points[p], &batch.image_points[p], k, c1());
        }
        expected *= 1.0 / 8.0;
        assert_abs_diff_eq!(cmel_loss(&batch, k, c1()), expected, epsilon = 1e-15);
        // Mean arithmetic of the documented two-pair case.
        assert_abs_diff_eq!((0.0 + PI / 6.0) * 0.5, PI / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn selection_unique_extremes() {
        let batch = random_batch(19, 4, 2, 0.5);
        let batch = BatchEmbeddings::new(batch.image_points, batch.gene_points, vec![5, 1, 9, 3]);
        let (l, h) = select_hngec_lngec(&batch, 1);
        assert_eq!(l, vec![1]);
        assert_eq!(h, vec![2]);
    }

    #[test]
    fn selection_all_tied_breaks_by_index() {
        let (l, h) = select_by_ngec(&[7, 7, 7, 7], 2);
        assert_eq!(l, vec![0, 1]);
        assert_eq!(h, vec![2, 3]);
    }

    #[test]
    fn selection_matches_brute_force_sort() {
        let mut r = rng::stream(23, 0);
        for _ in 0..50 {
            let n = 7 + rng::below(&mut r, 10);
            let ngec: Vec<u64> = (0..n).map(|_| rng::below(&mut r, 12) as u64).collect();
            let (l, h) = select_by_ngec(&ngec, 3);
            // Independent full sort.
            let mut pairs: Vec<(u64, usize)> = ngec.iter().cloned().zip(0..n).collect();
            pairs.sort();
            let expect_l: Vec<usize> = pairs[..3].iter().map(|&(_, i)| i).collect();
            let expect_h: Vec<usize> = pairs[n - 3..].iter().map(|&(_, i)| i).collect();
            assert_eq!(l, expect_l);
            assert_eq!(h, expect_h);
        }
    }

    #[test]
    #[should_panic(expected = "2q must not exceed")]
    fn selection_rejects_oversized_q() {
        select_by_ngec(&[1, 2, 3], 2);
    }

    #[test]
    fn imel_zero_when_ordering_satisfied() {
        // Low-NGEC spots (indices 0,1) have small norms → wide apertures;
        // high-NGEC spots (2,3) have large norms → narrow apertures.
        let tangents = [vec![0.1, 0.0], vec![0.15, 0.0], vec![1.5, 0.0], vec![2.0, 0.0]];
        let points = lift(&tangents);
        let batch = BatchEmbeddings::new(points.clone(), points, vec![1, 2, 50, 60]);
        let (g, i, avg) = imel_loss(&batch, 2, ConeConstants::default(), c1());
        assert_eq!((g, i, avg), (0.0, 0.0, 0.0));
    }

    #[test]
    fn imel_single_hinge_matches_aperture_gap() {
        // Norms chosen so aper(L) = 0.3 and aper(H) = 0.5: the hinge is
        // active with gap 0.2 in each modality.
        let k = ConeConstants::default();
        let n_l = 2.0 * k.k_aper / (0.3f64).sin();
        let n_h = 2.0 * k.k_aper / (0.5f64).sin();
        let l_point = HyperPoint::from_space(vec![n_l, 0.0], c1());
        let h_point = HyperPoint::from_space(vec![n_h, 0.0], c1());
        let batch = BatchEmbeddings::new(
            vec![l_point.clone(), h_point.clone()],
            vec![l_point, h_point],
            vec![0, 9],
        );
        let (g, i, avg) = imel_loss(&batch, 1, k, c1());
        assert_abs_diff_eq!(g, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(i, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(avg, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn imel_matches_hand_expanded_double_sum() {
        let k = ConeConstants::default();
        let batch = random_batch(29, 6, 3, 1.0);
        let (l, h) = select_hngec_lngec(&batch, 2);
        let (g, i, avg) = imel_loss(&batch, 2, k, c1());
        for (points, term) in [(&batch.gene_points, g), (&batch.image_points, i)] {
            let a = |idx: usize| half_aperture(&points[idx], k, c1());
            let expected = ((a(h[0]) - a(l[0])).max(0.0)
                + (a(h[1]) - a(l[0])).max(0.0)
                + (a(h[0]) - a(l[1])).max(0.0)
                + (a(h[1]) - a(l[1])).max(0.0))
                / 4.0;
            assert_abs_diff_eq!(term, expected, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(avg, (g + i) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn final_loss_degenerate_weights() {
        let batch = random_batch(31, 6, 3, 1.0);
        let w = LossWeights { lambda: 0.0, beta: 0.0, tau: 0.07, q: 2 };
        let b = final_loss(&batch, &w, SimMode::CosineFull, false, ConeConstants::default(), c1());
        assert_eq!(b.l_final, b.l_cont);
    }

    #[test]
    fn final_loss_equals_cont_when_constraints_satisfied() {
        // Constraint-satisfying fixture: same-ray pairs (zero cone
        // violation against the wide gene cones) with norms increasing in
        // NGEC, so every high-NGEC aperture is below every low-NGEC one.
        let k = ConeConstants::default();
        let gene_t = [vec![0.08, 0.0], vec![0.07, 0.0], vec![0.06, 0.0], vec![0.05, 0.0]];
        let img_t = [vec![0.35, 0.0], vec![0.3, 0.0], vec![0.25, 0.0], vec![0.2, 0.0]];
        let batch = BatchEmbeddings::new(lift(&img_t), lift(&gene_t), vec![9, 7, 4, 2]);
        let w = LossWeights { lambda: 0.1, beta: 0.1, tau: 0.07, q: 2 };
        let b = final_loss(&batch, &w, SimMode::CosineFull, false, k, c1());
        assert_eq!(b.l_ent_cross, 0.0);
        assert_eq!(b.l_ent_intra, 0.0);
        assert_eq!(b.l_final, b.l_cont);
    }

    #[test]
    fn final_loss_recomposes_from_constituents() {
        let k = ConeConstants::default();
        let batch = random_batch(37, 8, 4, 1.0);
        let w = LossWeights { lambda: 0.1, beta: 0.1, tau: 0.07, q: 3 };
        let b = final_loss(&batch, &w, SimMode::CosineFull, false, k, c1());
        let l_cont = contrastive_loss(&batch, w.tau, SimMode::CosineFull, c1());
        let l_cross = cmel_loss(&batch, k, c1());
        let (gi, ii, avg) = imel_loss(&batch, w.q, k, c1());
        assert_eq!(b.l_cont, l_cont);
        assert_eq!(b.l_ent_cross, l_cross);
        assert_eq!((b.l_ent_intra_gene, b.l_ent_intra_image, b.l_ent_intra), (gi, ii, avg));
        assert_abs_diff_eq!(b.l_final, (l_cont + 0.1 * l_cross) + 0.1 * avg, epsilon = 1e-15);
        assert!(b.l_ent_cross >= 0.0 && b.l_ent_intra >= 0.0);
    }

    /// Gram-Schmidt orthonormalization of a random square matrix: a
    /// deterministic rotation for the invariance tests.
    fn random_rotation(seed: u64, dim: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, 600);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng::gaussian(&mut r)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        basis
    }

    fn rotate_point(p: &HyperPoint, rot: &[Vec<f64>]) -> HyperPoint {
        let space: Vec<f64> =
            rot.iter().map(|row| row.iter().zip(&p.space).map(|(a, b)| a * b).sum()).collect();
        HyperPoint::from_space(space, c1())
    }

    #[test]
    fn entailment_losses_invariant_under_rotation() {
        let k = ConeConstants::default();
        let batch = random_batch(41, 8, 3, 1.0);
        let rot = random_rotation(43, 3);
        let rotated = BatchEmbeddings::new(
            batch.image_points.iter().map(|p| rotate_point(p, &rot)).collect(),
            batch.gene_points.iter().map(|p| rotate_point(p, &rot)).collect(),
            batch.ngec.clone(),
        );
        // IMEL depends on spatial norms only; CMEL on norms and inner
        // products. A simultaneous rotation preserves both.
        let (g0, i0, a0) = imel_loss(&batch, 3, k, c1());
        let (g1, i1, a1) = imel_loss(&rotated, 3, k, c1());
        assert_abs_diff_eq!(g0, g1, epsilon = 1e-9);
        assert_abs_diff_eq!(i0, i1, epsilon = 1e-9);
        assert_abs_diff_eq!(a0, a1, epsilon = 1e-9);
        assert_abs_diff_eq!(
            cmel_loss(&batch, k, c1()),
            cmel_loss(&rotated, k, c1()),
            epsilon = 1e-9
        );
    }

    #[test]
    fn imel_invariant_under_independent_per_modality_rotation() {
        // Apertures are functions of the spatial norm alone, so even
        // rotating one modality by itself leaves IMEL unchanged.
        let k = ConeConstants::default();
        let batch = random_batch(47, 8, 3, 1.0);
        let rot = random_rotation(49, 3);
        let rotated = BatchEmbeddings::new(
            batch.image_points.clone(),
            batch.gene_points.iter().map(|p| rotate_point(p, &rot)).collect(),
            batch.ngec.clone(),
        );
        let (g0, i0, _) = imel_loss(&batch, 3, k, c1());
        let (g1, i1, _) = imel_loss(&rotated, 3, k, c1());
        assert_abs_diff_eq!(g0, g1, epsilon = 1e-9);
        assert_eq!(i0, i1);
    }

    #[test]
    #[should_panic(expected = "empty batch")]
    fn contrastive_rejects_empty_batch() {
        let batch = BatchEmbeddings::new(vec![], vec![], vec![]);
        contrastive_loss(&batch, 0.07, SimMode::CosineFull, c1());
    }
}
