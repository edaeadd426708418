//! Trainable maps from raw inputs to tangent vectors: a single fully
//! connected layer for gene expression and a two-layer projector (with a
//! max(0, x) nonlinearity) for precomputed image features. Outputs are
//! lifted to the hyperboloid with the exponential map.
//!
//! Pure kernels accumulate in the same order as the tape builders in
//! [`diff`] (ascending input index, zero inputs skipped), so both routes
//! produce bit-identical tangents.

use crate::lorentz::{exp_map, Curvature, HyperPoint, TangentVec};
use crate::rng;

/// Matrix shapes for one encoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub gene_count: usize,
    pub feat_dim: usize,
    pub hidden: usize,
    pub n: usize,
}

impl EncoderDims {
    /// Defaults: 512-dim image features, 64 hidden units, 32-dim embeddings.
    pub fn new(gene_count: usize) -> Self {
        Self { gene_count, feat_dim: 512, hidden: 64, n: 32 }
    }
}

/// Single fully connected layer: gene_count → n.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneEncoder {
    pub gene_count: usize,
    pub n: usize,
    /// Row-major gene_count×n.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Two affine layers with max(0, x) between: feat_dim → hidden → n.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjector {
    pub feat_dim: usize,
    pub hidden: usize,
    pub n: usize,
    /// Row-major feat_dim×hidden.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major hidden×n.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// x·W + b with W row-major in_dim×out_dim; ascending-index accumulation,
/// zero inputs skipped, bias added after the full product.
fn affine(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    assert_eq!(x.len(), in_dim, "affine: input length mismatch");
    let mut out = vec![0.0; out_dim];
    for (t, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += xv * w[t * out_dim + j];
        }
    }
    for (o, bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

impl GeneEncoder {
    /// The pre-lift tangent vector for one expression panel.
    pub fn tangent(&self, expr: &[f64]) -> TangentVec {
        TangentVec::new(affine(expr, &self.weight, &self.bias, self.gene_count, self.n))
    }
}

impl ImageProjector {
    /// The pre-lift tangent vector for one feature vector.
    pub fn tangent(&self, feat: &[f64]) -> TangentVec {
        let mut h = affine(feat, &self.w1, &self.b1, self.feat_dim, self.hidden);
        for v in &mut h {
            *v = v.max(0.0);
        }
        TangentVec::new(affine(&h, &self.w2, &self.b2, self.hidden, self.n))
    }
}

/// Encode one expression panel to the hyperboloid.
pub fn encode_gene(enc: &GeneEncoder, expr: &[f64], c: Curvature) -> HyperPoint {
    exp_map(&enc.tangent(expr), c)
}

/// Encode one image feature vector to the hyperboloid.
pub fn encode_image(proj: &ImageProjector, feat: &[f64], c: Curvature) -> HyperPoint {
    exp_map(&proj.tangent(feat), c)
}

fn xavier(r: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng::uniform(r, -a, a)).collect()
}

/// Deterministic initialization: weights uniform in ±sqrt(6/(fan_in+fan_out))
/// per layer, biases zero. Each matrix draws from its own seeded stream.
pub fn init_params(seed: u64, dims: &EncoderDims) -> (GeneEncoder, ImageProjector) {
    let gene = GeneEncoder {
        gene_count: dims.gene_count,
        n: dims.n,
        weight: xavier(&mut rng::stream(seed, 11), dims.gene_count, dims.n),
        bias: vec![0.0; dims.n],
    };
    let proj = ImageProjector {
        feat_dim: dims.feat_dim,
        hidden: dims.hidden,
        n: dims.n,
        w1: xavier(&mut rng::stream(seed, 12), dims.feat_dim, dims.hidden),
        b1: vec![0.0; dims.hidden],
        w2: xavier(&mut rng::stream(seed, 13), dims.hidden, dims.n),
        b2: vec![0.0; dims.n],
    };
    (gene, proj)
}

/// Tape builders for whole batches; parameters enter as gradient-tracked
/// leaves in a fixed registration order the trainer relies on.
pub mod diff {
    use super::{GeneEncoder, ImageProjector};
    use crate::autodiff::{Tape, Tensor};

    #[derive(Debug, Clone, Copy)]
    pub struct GeneEncoderVars {
        pub weight: Tensor,
        pub bias: Tensor,
    }

    #[derive(Debug, Clone, Copy)]
    pub struct ImageProjectorVars {
        pub w1: Tensor,
        pub b1: Tensor,
        pub w2: Tensor,
        pub b2: Tensor,
    }

    pub fn gene_leaves(tape: &mut Tape, enc: &GeneEncoder) -> GeneEncoderVars {
        GeneEncoderVars {
            weight: tape.leaf(enc.gene_count, enc.n, enc.weight.clone(), true),
            bias: tape.leaf(1, enc.n, enc.bias.clone(), true),
        }
    }

    pub fn image_leaves(tape: &mut Tape, proj: &ImageProjector) -> ImageProjectorVars {
        ImageProjectorVars {
            w1: tape.leaf(proj.feat_dim, proj.hidden, proj.w1.clone(), true),
            b1: tape.leaf(1, proj.hidden, proj.b1.clone(), true),
            w2: tape.leaf(proj.hidden, proj.n, proj.w2.clone(), true),
            b2: tape.leaf(1, proj.n, proj.b2.clone(), true),
        }
    }

    /// N×gene_count expression rows → N×n tangent rows.
    pub fn encode_gene_batch(tape: &mut Tape, vars: &GeneEncoderVars, x: Tensor) -> Tensor {
        let t = tape.matmul(x, vars.weight);
        tape.add_row_broadcast(t, vars.bias)
    }

    /// N×feat_dim feature rows → N×n tangent rows.
    pub fn encode_image_batch(tape: &mut Tape, vars: &ImageProjectorVars, x: Tensor) -> Tensor {
        let h = tape.matmul(x, vars.w1);
        let h = tape.add_row_broadcast(h, vars.b1);
        let h = tape.hinge_max0(h);
        let t = tape.matmul(h, vars.w2);
        tape.add_row_broadcast(t, vars.b2)
    }
}
