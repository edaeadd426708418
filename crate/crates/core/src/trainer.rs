//! Deterministic mini-batch training: encode, lift, compose the loss on
//! the tape, backpropagate, and update with Adam plus decoupled weight
//! decay. Checkpoints capture parameters, optimizer state, and history
//! bit-exactly, so a resumed run reproduces an uninterrupted one.

use crate::autodiff::Tape;
use crate::data::{encoder_inputs, DataError, Dataset, GenePanel};
use crate::encoders::{self, EncoderDims, GeneEncoder, ImageProjector};
use crate::lorentz::{ConeConstants, Curvature, HyperPoint};
use crate::losses::{self, BatchEmbeddings, LossWeights, SimMode};
use crate::rng;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DELSTCKP";
const CHECKPOINT_VERSION: u32 = 1;
/// Salt offset for the per-epoch shuffle streams.
const SHUFFLE_SALT: u64 = 2000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch {batch} produced a non-finite {term}: {value}")]
    NonFinite { batch: usize, term: &'static str, value: f64 },
    #[error("dataset has {spots} spots; one batch needs batch_size = {batch_size}")]
    TooSmall { spots: usize, batch_size: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: checkpoint version {found}, expected {expected}")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated checkpoint ({context})")]
    Truncated { path: String, context: String },
    #[error("{path}: malformed checkpoint ({context})")]
    MalformedCheckpoint { path: String, context: String },
}

/// Training hyperparameters. `q = None` scales the tail selection with the
/// batch: round(0.15·batch_size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub q: Option<usize>,
    pub seed: u64,
    pub sim_mode: SimMode,
    pub symmetric: bool,
    pub enable_cmel: bool,
    pub enable_imel: bool,
    pub curvature: f64,
    pub k_aper: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 256,
            lr: 5e-5,
            weight_decay: 0.2,
            tau: 0.07,
            lambda: 0.1,
            beta: 0.1,
            q: None,
            seed: 0,
            sim_mode: SimMode::CosineFull,
            symmetric: false,
            enable_cmel: true,
            enable_imel: true,
            curvature: 1.0,
            k_aper: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn resolved_q(&self) -> usize {
        self.q.unwrap_or(((0.15 * self.batch_size as f64).round() as usize).max(1))
    }

    pub fn validate(&self) {
        assert!(self.epochs >= 1, "config: epochs must be positive");
        assert!(self.batch_size >= 2, "config: batch_size must be at least 2");
        assert!(self.lr >= 0.0 && self.lr.is_finite(), "config: lr must be non-negative");
        assert!(self.weight_decay >= 0.0, "config: weight_decay must be non-negative");
        assert!(self.tau > 0.0, "config: tau must be positive");
        assert!(self.curvature > 0.0, "config: curvature must be positive");
        assert!(self.k_aper > 0.0, "config: k_aper must be positive");
        assert!(2 * self.resolved_q() <= self.batch_size, "config: 2q must not exceed batch_size");
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, beta: self.beta, tau: self.tau, q: self.resolved_q() }
    }
}

/// Adam moment accumulators, one pair of blocks per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_lens: &[usize]) -> Self {
        Self {
            step: 0,
            m: block_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: block_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }
}

/// One bias-corrected Adam step over parallel parameter/gradient blocks.
/// Decoupled weight decay (p ← p − lr·wd·p) is applied before the delta.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    wd: f64,
) {
    assert_eq!(params.len(), grads.len(), "adam: block count mismatch");
    assert_eq!(params.len(), state.m.len(), "adam: state block count mismatch");
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (b, block) in params.iter_mut().enumerate() {
        assert_eq!(block.len(), grads[b].len(), "adam: shape mismatch in block {b}");
        for (e, p) in block.iter_mut().enumerate() {
            let g = grads[b][e];
            *p -= lr * wd * *p;
            let m = &mut state.m[b][e];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            let v = &mut state.v[b][e];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Mean loss terms of one epoch (epoch 0 is the pre-training evaluation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cont: f64,
    pub l_ent_cross: f64,
    pub l_ent_intra: f64,
    pub l_final: f64,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub gene: GeneEncoder,
    pub proj: ImageProjector,
    pub state: AdamState,
    pub history: Vec<EpochRecord>,
}

/// Everything needed to resume: parameters, optimizer state, finished
/// epoch count, and the history so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub gene: GeneEncoder,
    pub proj: ImageProjector,
    pub state: AdamState,
    pub completed_epochs: u32,
    pub history: Vec<EpochRecord>,
}

/// The history log as tab-separated text.
pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch\tl_cont\tl_ent_cross\tl_ent_intra\tl_final\tviolation_rate\n");
    for r in history {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.l_cont, r.l_ent_cross, r.l_ent_intra, r.l_final, r.violation_rate
        );
    }
    out
}

fn shuffled_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, SHUFFLE_SALT + epoch as u64), &mut idx);
    idx
}

struct BatchData<'a> {
    gene_rows: &'a [Vec<f64>],
    feat_rows: &'a [Vec<f64>],
    ngec: &'a [u64],
}

fn gather_batch(data: &BatchData, idxs: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<u64>) {
    let mut g = Vec::with_capacity(idxs.len() * data.gene_rows[0].len());
    let mut f = Vec::with_capacity(idxs.len() * data.feat_rows[0].len());
    let mut n = Vec::with_capacity(idxs.len());
    for &i in idxs {
        g.extend_from_slice(&data.gene_rows[i]);
        f.extend_from_slice(&data.feat_rows[i]);
        n.push(data.ngec[i]);
    }
    (g, f, n)
}

fn points_from_tape(
    tape: &Tape,
    lift: &crate::lorentz::diff::LiftedBatch,
    n_dim: usize,
) -> Vec<HyperPoint> {
    let space = tape.values(lift.space);
    let time = tape.values(lift.time);
    (0..lift.space.rows())
        .map(|r| HyperPoint { space: space[r * n_dim..(r + 1) * n_dim].to_vec(), time: time[r] })
        .collect()
}

/// Accumulates per-batch terms into an epoch mean.
#[derive(Default)]
struct EpochAccum {
    l_cont: f64,
    cross: f64,
    intra: f64,
    l_final: f64,
    viol: f64,
    batches: usize,
}

impl EpochAccum {
    fn add(&mut self, l_cont: f64, cross: f64, intra: f64, l_final: f64, viol: f64) {
        self.l_cont += l_cont;
        self.cross += cross;
        self.intra += intra;
        self.l_final += l_final;
        self.viol += viol;
        self.batches += 1;
    }

    fn record(&self, epoch: usize) -> EpochRecord {
        let n = self.batches as f64;
        EpochRecord {
            epoch,
            l_cont: self.l_cont / n,
            l_ent_cross: self.cross / n,
            l_ent_intra: self.intra / n,
            l_final: self.l_final / n,
            violation_rate: self.viol / n,
        }
    }
}

/// Pre-training evaluation over the dataset-order batch partition, using
/// the pure kernels; disabled terms are recorded as zero, mirroring the
/// tape semantics.
fn epoch_zero_record(
    data: &BatchData,
    gene: &GeneEncoder,
    proj: &ImageProjector,
    cfg: &TrainConfig,
) -> EpochRecord {
    let c = Curvature::new(cfg.curvature);
    let k = ConeConstants { k_aper: cfg.k_aper };
    let w = cfg.weights();
    let n = data.ngec.len();
    let mut acc = EpochAccum::default();
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        if chunk.len() < cfg.batch_size {
            break;
        }
        let gene_points: Vec<HyperPoint> =
            chunk.iter().map(|&i| encoders::encode_gene(gene, &data.gene_rows[i], c)).collect();
        let image_points: Vec<HyperPoint> =
            chunk.iter().map(|&i| encoders::encode_image(proj, &data.feat_rows[i], c)).collect();
        let ngec: Vec<u64> = chunk.iter().map(|&i| data.ngec[i]).collect();
        let batch = BatchEmbeddings::new(image_points, gene_points, ngec);
        let l_cont = if cfg.symmetric {
            losses::contrastive_loss_symmetric(&batch, cfg.tau, cfg.sim_mode, c)
        } else {
            losses::contrastive_loss(&batch, cfg.tau, cfg.sim_mode, c)
        };
        let cross = if cfg.enable_cmel { losses::cmel_loss(&batch, k, c) } else { 0.0 };
        let intra = if cfg.enable_imel { losses::imel_loss(&batch, w.q, k, c).2 } else { 0.0 };
        let mut l_final = l_cont;
        if cfg.enable_cmel {
            l_final += cfg.lambda * cross;
        }
        if cfg.enable_imel {
            l_final += cfg.beta * intra;
        }
        acc.add(l_cont, cross, intra, l_final, losses::violation_rate(&batch, k, c));
    }
    acc.record(0)
}

/// Train from scratch.
pub fn train(
    ds: &Dataset,
    panel: &GenePanel,
    cfg: &TrainConfig,
    dims: &EncoderDims,
) -> Result<TrainResult, TrainError> {
    train_with_start(ds, panel, cfg, dims, None)
}

/// Train, optionally resuming from a checkpoint whose `completed_epochs`
/// marks where the epoch loop restarts.
pub fn train_with_start(
    ds: &Dataset,
    panel: &GenePanel,
    cfg: &TrainConfig,
    dims: &EncoderDims,
    start: Option<Checkpoint>,
) -> Result<TrainResult, TrainError> {
    cfg.validate();
    assert_eq!(
        panel.gene_count, dims.gene_count,
        "panel gene_count and encoder input width disagree"
    );
    if ds.spots.len() < cfg.batch_size {
        return Err(TrainError::TooSmall { spots: ds.spots.len(), batch_size: cfg.batch_size });
    }
    if ds.feat_dim != dims.feat_dim {
        return Err(DataError::Schema(format!(
            "dataset feature width {} does not match encoder feat_dim {}",
            ds.feat_dim, dims.feat_dim
        ))
        .into());
    }

    let gene_rows = encoder_inputs(ds, panel)?;
    let feat_rows: Vec<Vec<f64>> = ds.spots.iter().map(|s| s.image_feat.clone()).collect();
    let ngec: Vec<u64> = ds.spots.iter().map(|s| s.ngec).collect();
    let data = BatchData { gene_rows: &gene_rows, feat_rows: &feat_rows, ngec: &ngec };

    let c = Curvature::new(cfg.curvature);
    let k = ConeConstants { k_aper: cfg.k_aper };
    let w = cfg.weights();

    let (mut gene, mut proj, mut state, mut history, first_epoch) = match start {
        Some(ckpt) => {
            let first = ckpt.completed_epochs as usize + 1;
            (ckpt.gene, ckpt.proj, ckpt.state, ckpt.history, first)
        }
        None => {
            let (gene, proj) = encoders::init_params(cfg.seed, dims);
            let state = AdamState::new(&[
                gene.weight.len(),
                gene.bias.len(),
                proj.w1.len(),
                proj.b1.len(),
                proj.w2.len(),
                proj.b2.len(),
            ]);
            let history = vec![epoch_zero_record(&data, &gene, &proj, cfg)];
            (gene, proj, state, history, 1)
        }
    };

    let n_dim = dims.n;
    for epoch in first_epoch..=cfg.epochs {
        let order = shuffled_order(cfg.seed, epoch, ds.spots.len());
        let mut acc = EpochAccum::default();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < cfg.batch_size {
                break;
            }
            let (gvals, fvals, bngec) = gather_batch(&data, chunk);
            let mut tape = Tape::new();
            let gv = encoders::diff::gene_leaves(&mut tape, &gene);
            let pv = encoders::diff::image_leaves(&mut tape, &proj);
            let xg = tape.leaf(chunk.len(), dims.gene_count, gvals, false);
            let xi = tape.leaf(chunk.len(), dims.feat_dim, fvals, false);
            let tg = encoders::diff::encode_gene_batch(&mut tape, &gv, xg);
            let ti = encoders::diff::encode_image_batch(&mut tape, &pv, xi);
            let gene_lift = crate::lorentz::diff::lift_batch(&mut tape, tg, c);
            let image_lift = crate::lorentz::diff::lift_batch(&mut tape, ti, c);
            let d = losses::diff::final_loss(
                &mut tape,
                &gene_lift,
                &image_lift,
                &bngec,
                &w,
                cfg.sim_mode,
                cfg.symmetric,
                k,
                c,
                cfg.enable_cmel,
                cfg.enable_imel,
            );
            for (term, t) in [
                ("l_cont", d.l_cont),
                ("l_ent_cross", d.l_ent_cross),
                ("l_ent_intra", d.l_ent_intra),
                ("l_final", d.l_final),
            ] {
                let value = tape.value(t);
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { batch: batch_idx, term, value });
                }
            }
            tape.backward(d.l_final);

            // Violation rate from the lifted values through the pure kernel.
            let batch_emb = BatchEmbeddings::new(
                points_from_tape(&tape, &image_lift, n_dim),
                points_from_tape(&tape, &gene_lift, n_dim),
                bngec,
            );
            acc.add(
                tape.value(d.l_cont),
                tape.value(d.l_ent_cross),
                tape.value(d.l_ent_intra),
                tape.value(d.l_final),
                losses::violation_rate(&batch_emb, k, c),
            );

            let grads = [
                tape.grad(gv.weight).to_vec(),
                tape.grad(gv.bias).to_vec(),
                tape.grad(pv.w1).to_vec(),
                tape.grad(pv.b1).to_vec(),
                tape.grad(pv.w2).to_vec(),
                tape.grad(pv.b2).to_vec(),
            ];
            let mut blocks: [&mut [f64]; 6] = [
                &mut gene.weight,
                &mut gene.bias,
                &mut proj.w1,
                &mut proj.b1,
                &mut proj.w2,
                &mut proj.b2,
            ];
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut blocks, &grad_refs, &mut state, cfg.lr, cfg.weight_decay);
        }
        history.push(acc.record(epoch));
    }
    Ok(TrainResult { gene, proj, state, history })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

/// Write a checkpoint. The layout is little-endian: magic, version, Adam
/// step, completed epochs, history rows, then six named parameter blocks
/// each followed by its two moment blocks.
pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ckpt.state.step);
    w.u32(ckpt.completed_epochs);
    w.u32(ckpt.history.len() as u32);
    for r in &ckpt.history {
        w.f64(r.epoch as f64);
        w.f64(r.l_cont);
        w.f64(r.l_ent_cross);
        w.f64(r.l_ent_intra);
        w.f64(r.l_final);
        w.f64(r.violation_rate);
    }
    w.u64(ckpt.gene.gene_count as u64);
    w.u64(ckpt.gene.n as u64);
    w.u64(ckpt.proj.feat_dim as u64);
    w.u64(ckpt.proj.hidden as u64);
    let blocks: [&[f64]; 6] = [
        &ckpt.gene.weight,
        &ckpt.gene.bias,
        &ckpt.proj.w1,
        &ckpt.proj.b1,
        &ckpt.proj.w2,
        &ckpt.proj.b2,
    ];
    for (b, block) in blocks.iter().enumerate() {
        w.f64s(block);
        w.f64s(&ckpt.state.m[b]);
        w.f64s(&ckpt.state.v[b]);
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
    file.write_all(&w.buf)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Truncated { path: self.path.clone(), context: context.into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &str) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64s(&mut self, context: &str) -> Result<Vec<f64>, TrainError> {
        let n = self.u64(context)? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64(context)?);
        }
        Ok(v)
    }
}

/// Read a checkpoint written by [`checkpoint_save`].
pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
    let mut r = Reader { buf: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic { path: r.path });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            path: r.path,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let step = r.u64("adam step")?;
    let completed_epochs = r.u32("epoch counter")?;
    let n_rows = r.u32("history length")?;
    let mut history = Vec::with_capacity(n_rows as usize);
    for _ in 0..n_rows {
        let epoch = r.f64("history row")? as usize;
        history.push(EpochRecord {
            epoch,
            l_cont: r.f64("history row")?,
            l_ent_cross: r.f64("history row")?,
            l_ent_intra: r.f64("history row")?,
            l_final: r.f64("history row")?,
            violation_rate: r.f64("history row")?,
        });
    }
    let gene_count = r.u64("gene_count")? as usize;
    let n = r.u64("embed dim")? as usize;
    let feat_dim = r.u64("feat_dim")? as usize;
    let hidden = r.u64("hidden dim")? as usize;
    let mut blocks = Vec::with_capacity(6);
    let mut m = Vec::with_capacity(6);
    let mut v = Vec::with_capacity(6);
    for b in 0..6 {
        let ctx = format!("parameter block {b}");
        blocks.push(r.f64s(&ctx)?);
        m.push(r.f64s(&ctx)?);
        v.push(r.f64s(&ctx)?);
    }
    if r.pos != bytes.len() {
        return Err(TrainError::MalformedCheckpoint {
            path: r.path,
            context: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let expect = [gene_count * n, n, feat_dim * hidden, hidden, hidden * n, n];
    for (b, (&e, block)) in expect.iter().zip(&blocks).enumerate() {
        if block.len() != e || m[b].len() != e || v[b].len() != e {
            return Err(TrainError::MalformedCheckpoint {
                path: r.path,
                context: format!("block {b} has {} values, expected {e}", block.len()),
            });
        }
    }
    let mut it = blocks.into_iter();
    let gene = GeneEncoder { gene_count, n, weight: it.next().unwrap(), bias: it.next().unwrap() };
    let proj = ImageProjector {
        feat_dim,
        hidden,
        n,
        w1: it.next().unwrap(),
        b1: it.next().unwrap(),
        w2: it.next().unwrap(),
        b2: it.next().unwrap(),
    };
    Ok(Checkpoint { gene, proj, state: AdamState { step, m, v }, completed_epochs, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, select_hvg, Strategy, SyntheticConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_corpus(seed: u64) -> (Dataset, GenePanel, EncoderDims) {
        let cfg = SyntheticConfig {
            n_slides: 2,
            spots_per_slide: 80,
            n_genes: 50,
            n_classes: 4,
            feat_dim: 12,
            hierarchy_strength: 1.0,
            seed,
        };
        let ds = generate_synthetic(&cfg);
        let panel = select_hvg(&ds, Strategy::EOverlapHvg, 20).unwrap();
        let dims = EncoderDims { gene_count: 20, feat_dim: 12, hidden: 8, n: 6 };
        (ds, panel, dims)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradients_no_decay_is_identity() {
        let mut p = vec![0.3, -0.7, 2.0];
        let before = p.clone();
        let mut state = AdamState::new(&[3]);
        let g = vec![0.0; 3];
        adam_step(&mut [&mut p], &[&g], &mut state, 0.01, 0.0);
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // t=1, g=1: m̂ = 1, v̂ = 1, so Δ = −lr/(1 + ε).
        let mut p = vec![0.5];
        let mut state = AdamState::new(&[1]);
        let g = vec![1.0];
        let lr = 0.01;
        adam_step(&mut [&mut p], &[&g], &mut state, lr, 0.0);
        let expect = 0.5 - lr * (1.0 / (1.0 + ADAM_EPS));
        assert_abs_diff_eq!(p[0], expect, epsilon = 1e-18);
    }

    #[test]
    fn adam_decay_with_zero_gradient_is_pure_shrink() {
        let mut p = vec![2.0, -4.0];
        let mut state = AdamState::new(&[2]);
        let g = vec![0.0; 2];
        adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.5);
        // Shrink factor 1 − lr·wd = 0.95; the Adam delta is zero.
        assert_abs_diff_eq!(p[0], 2.0 * 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], -4.0 * 0.95, epsilon = 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (ds, panel, dims) = tiny_corpus(1);
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..tiny_train_cfg() };
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        let (gene0, proj0) = crate::encoders::init_params(cfg.seed, &dims);
        assert_eq!(result.gene, gene0);
        assert_eq!(result.proj, proj0);
    }

    #[test]
    fn disabled_entailment_terms_collapse_final_to_contrastive() {
        let (ds, panel, dims) = tiny_corpus(2);
        let cfg = TrainConfig { enable_cmel: false, enable_imel: false, ..tiny_train_cfg() };
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        assert_eq!(result.history.len(), 3);
        for r in &result.history {
            assert_eq!(r.l_final, r.l_cont, "epoch {}", r.epoch);
            assert_eq!(r.l_ent_cross, 0.0);
            assert_eq!(r.l_ent_intra, 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, panel, dims) = tiny_corpus(3);
        let cfg = tiny_train_cfg();
        let a = train(&ds, &panel, &cfg, &dims).unwrap();
        let b = train(&ds, &panel, &cfg, &dims).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss() {
        let (ds, panel, dims) = tiny_corpus(4);
        let cfg = TrainConfig { epochs: 4, ..tiny_train_cfg() };
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        let first = result.history.iter().find(|r| r.epoch == 1).unwrap();
        let last = result.history.last().unwrap();
        assert!(
            last.l_final < first.l_final,
            "no improvement: epoch 1 {} vs epoch {} {}",
            first.l_final,
            last.epoch,
            last.l_final
        );
    }

    #[test]
    fn history_tsv_has_header_and_rows() {
        let history = vec![
            EpochRecord {
                epoch: 0,
                l_cont: 1.5,
                l_ent_cross: 0.2,
                l_ent_intra: 0.1,
                l_final: 1.53,
                violation_rate: 0.5,
            },
            EpochRecord {
                epoch: 1,
                l_cont: 1.2,
                l_ent_cross: 0.1,
                l_ent_intra: 0.05,
                l_final: 1.215,
                violation_rate: 0.4,
            },
        ];
        let tsv = history_to_tsv(&history);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch\tl_cont\tl_ent_cross\tl_ent_intra\tl_final\tviolation_rate");
        assert!(lines[1].starts_with("0\t1.5\t"));
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let (ds, panel, dims) = tiny_corpus(6);
        let cfg = TrainConfig { batch_size: 1024, q: Some(4), ..tiny_train_cfg() };
        let err = train(&ds, &panel, &cfg, &dims).unwrap_err();
        assert!(err.to_string().contains("one batch needs batch_size"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (ds, panel, dims) = tiny_corpus(7);
        let cfg = tiny_train_cfg();
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        let ckpt = Checkpoint {
            gene: result.gene,
            proj: result.proj,
            state: result.state,
            completed_epochs: cfg.epochs as u32,
            history: result.history,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        checkpoint_save(&path, &ckpt).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let (ds, panel, dims) = tiny_corpus(8);
        let cfg = tiny_train_cfg();
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        let ckpt = Checkpoint {
            gene: result.gene,
            proj: result.proj,
            state: result.state,
            completed_epochs: 2,
            history: result.history,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        checkpoint_save(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = checkpoint_load(&path).unwrap_err();
        assert!(matches!(err, TrainError::Truncated { .. }), "got: {err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let (ds, panel, dims) = tiny_corpus(9);
        let cfg = tiny_train_cfg();
        let result = train(&ds, &panel, &cfg, &dims).unwrap();
        let ckpt = Checkpoint {
            gene: result.gene,
            proj: result.proj,
            state: result.state,
            completed_epochs: 2,
            history: result.history,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        checkpoint_save(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = checkpoint_load(&path).unwrap_err();
        assert!(matches!(err, TrainError::Version { found: 99, .. }), "got: {err}");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (ds, panel, dims) = tiny_corpus(10);
        let full_cfg = TrainConfig { epochs: 4, ..tiny_train_cfg() };
        let full = train(&ds, &panel, &full_cfg, &dims).unwrap();

        let half_cfg = TrainConfig { epochs: 2, ..full_cfg };
        let half = train(&ds, &panel, &half_cfg, &dims).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        checkpoint_save(
            &path,
            &Checkpoint {
                gene: half.gene,
                proj: half.proj,
                state: half.state,
                completed_epochs: 2,
                history: half.history,
            },
        )
        .unwrap();
        let ckpt = checkpoint_load(&path).unwrap();
        let resumed = train_with_start(&ds, &panel, &full_cfg, &dims, Some(ckpt)).unwrap();
        assert_eq!(full, resumed);
    }
}
