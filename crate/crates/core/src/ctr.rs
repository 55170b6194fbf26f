//! Text-line recognition stage: a scaled-down conv encoder over 32x256 line
//! images, a causal transformer decoder, and a matching head that scores each
//! step feature against the frozen candidate matrix. Sequence termination is
//! emitted through a dedicated learned END row appended to the logits; that
//! row is internal and never exported with the candidates.
//!
//! Class-token decoder inputs are projected candidate rows rather than a
//! per-class embedding table, so classes appended to the matrix after
//! training need no new weights.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::clip::CandidateMatrix;
use crate::error::Error;
use crate::glyph::{Sample, LINE_HEIGHT, LINE_WIDTH};
use crate::seed;
use crate::tensor::nn::{self, Binding, ParamSet};
use crate::tensor::{
    load_checkpoint, save_checkpoint, softmax_row, AdamState, Graph, NodeId, Scalar, Tensor,
};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Softmax over dot products with the frozen candidate matrix.
    Match,
    /// Plain linear classifier over the training classes (ablation baseline).
    Fc,
}

impl HeadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(HeadMode::Match),
            "fc" => Ok(HeadMode::Fc),
            other => Err(Error::Parse {
                file: "head_mode".into(),
                line: 0,
                msg: format!("unknown head mode {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CtrDims {
    /// alignment dimension C' (must match the candidate matrix)
    pub embed_dim: usize,
    /// decoder model width
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// conv widths; pooling after every block except the last
    pub conv_widths: Vec<usize>,
}

impl Default for CtrDims {
    fn default() -> Self {
        CtrDims {
            embed_dim: 64,
            model_dim: 64,
            layers: 2,
            heads: 4,
            conv_widths: vec![16, 32, 64],
        }
    }
}

impl CtrDims {
    /// Flattened feature-sequence length for a line image.
    fn memory_len(&self) -> usize {
        let pools = self.conv_widths.len() - 1;
        let f = 1usize << pools;
        (LINE_HEIGHT / f) * (LINE_WIDTH / f)
    }
}

#[derive(Debug, Clone)]
pub struct CtrConfig {
    pub beta: f64,
    pub head_mode: HeadMode,
    pub max_decode_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        CtrConfig {
            beta: 0.001,
            head_mode: HeadMode::Match,
            max_decode_len: 10,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Decoder input token: BOS, a class drawn from the candidate matrix, or PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecTok {
    Bos,
    Class(usize), // index into the candidate matrix, not a class id
    Pad,
}

const SPECIAL_BOS: usize = 0;
const SPECIAL_PAD: usize = 1;

#[derive(Debug, Clone)]
pub struct CtrModel {
    pub dims: CtrDims,
    pub head_mode: HeadMode,
    pub max_decode_len: usize,
    /// class ids the fc head can emit, in output order (empty in match mode)
    pub fc_classes: Vec<usize>,
    pub params: ParamSet<f32>,
}

impl CtrModel {
    pub fn new(
        dims: CtrDims,
        head_mode: HeadMode,
        max_decode_len: usize,
        fc_classes: Vec<usize>,
        seed_v: u64,
    ) -> Self {
        let mut rng = seed::rng(seed::derive(seed_v, "ctr-init"));
        let mut p = ParamSet::new();
        let mut cin = 1;
        for (i, &w) in dims.conv_widths.iter().enumerate() {
            p.add_conv(&format!("enc.c{i}"), cin, w, &mut rng);
            p.add_layer_norm(&format!("enc.c{i}.ln"), w);
            cin = w;
        }
        p.add_dense("enc.proj", cin, dims.model_dim, &mut rng);
        p.add_embedding("enc.pos", dims.memory_len(), dims.model_dim, &mut rng);
        p.add_dense("dec.in", dims.embed_dim, dims.model_dim, &mut rng);
        p.add_embedding("dec.special", 2, dims.model_dim, &mut rng);
        p.add_embedding("dec.pos", max_decode_len + 1, dims.model_dim, &mut rng);
        for i in 0..dims.layers {
            p.add_decoder_layer(&format!("dec.l{i}"), dims.model_dim, dims.model_dim * 2, &mut rng);
        }
        p.add_layer_norm("dec.final", dims.model_dim);
        p.add_dense("dec.out", dims.model_dim, dims.embed_dim, &mut rng);
        match head_mode {
            HeadMode::Match => {
                p.add_init("head.end", &[1, dims.embed_dim], dims.embed_dim, &mut rng);
            }
            HeadMode::Fc => {
                // +1 output for END
                p.add_dense("head.fc", dims.embed_dim, fc_classes.len() + 1, &mut rng);
            }
        }
        CtrModel {
            dims,
            head_mode,
            max_decode_len,
            fc_classes,
            params: p,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = &self.dims;
        let mut m = vec![
            d.embed_dim,
            d.model_dim,
            d.layers,
            d.heads,
            self.max_decode_len,
            match self.head_mode {
                HeadMode::Match => 0,
                HeadMode::Fc => 1,
            },
            d.conv_widths.len(),
        ];
        m.extend(&d.conv_widths);
        m.push(self.fc_classes.len());
        m.extend(&self.fc_classes);
        let meta = Tensor::from_vec(&[m.len()], m.into_iter().map(|v| v as f32).collect());
        let mut entries = vec![("__meta__".to_string(), meta)];
        entries.extend(self.params.to_checkpoint());
        save_checkpoint(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == "__meta__")
            .ok_or_else(|| Error::Checkpoint("missing __meta__".into()))?;
        let m: Vec<usize> = meta.1.data.iter().map(|&v| v as usize).collect();
        if m.len() < 8 {
            return Err(Error::Checkpoint("bad __meta__".into()));
        }
        let ncw = m[6];
        let dims = CtrDims {
            embed_dim: m[0],
            model_dim: m[1],
            layers: m[2],
            heads: m[3],
            conv_widths: m[7..7 + ncw].to_vec(),
        };
        let nfc = m[7 + ncw];
        let fc_classes = m[8 + ncw..8 + ncw + nfc].to_vec();
        let head_mode = if m[5] == 0 { HeadMode::Match } else { HeadMode::Fc };
        let mut model = CtrModel::new(dims, head_mode, m[4], fc_classes, 0);
        let rest: Vec<(String, Tensor<f32>)> = entries
            .into_iter()
            .filter(|(n, _)| n != "__meta__")
            .collect();
        model.params.load_from(&rest)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// graph assembly
// ---------------------------------------------------------------------------

/// Line batch [N, 32, 256, 1] -> memory sequence [N, S, D].
fn encode_lines<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    dims: &CtrDims,
    lines: NodeId,
) -> NodeId {
    let n = g.shape(lines)[0];
    let n_blocks = dims.conv_widths.len();
    let mut x = lines;
    for i in 0..n_blocks {
        // pooling removed from the final block (1/4-res output map);
        // every first-layer kernel here is 3x3
        let pool = i + 1 < n_blocks;
        x = nn::conv_block(g, bind, &format!("enc.c{i}"), x, 1, pool);
    }
    let s = dims.memory_len();
    let c = *dims.conv_widths.last().unwrap();
    let flat = g.reshape(x, &[n, s, c]);
    let proj = nn::dense(g, bind, "enc.proj", flat);
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..s).collect();
    let pos_table = bind.id("enc.pos");
    let pos = g.embedding(pos_table, &pos_ids, &[n, s]);
    g.add(proj, pos)
}

/// Teacher-forced decoder pass: tokens [N][L] -> unit-norm step features
/// [N, L, C'].
fn decode_forward<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    dims: &CtrDims,
    memory: NodeId,
    p: &CandidateMatrix,
    tokens: &[Vec<DecTok>],
) -> NodeId {
    let n = tokens.len();
    let l = tokens[0].len();
    let k = p.len();

    // class positions select their candidate row, specials select their
    // learned embedding; both via one-hot matmuls so gradients flow to
    // dec.in and dec.special
    let mut class_sel = Tensor::zeros(&[n * l, k]);
    let mut spec_sel = Tensor::zeros(&[n * l, 2]);
    for (i, row) in tokens.iter().enumerate() {
        for (t, &tok) in row.iter().enumerate() {
            let at = i * l + t;
            match tok {
                DecTok::Class(ki) => class_sel.data[at * k + ki] = T::one(),
                DecTok::Bos => spec_sel.data[at * 2 + SPECIAL_BOS] = T::one(),
                DecTok::Pad => spec_sel.data[at * 2 + SPECIAL_PAD] = T::one(),
            }
        }
    }
    let p_rows = g.constant(Tensor::from_vec(
        &[k, p.dim],
        p.rows_flat().iter().map(|&v| T::from_f32(v)).collect(),
    ));
    let class_sel = g.constant(class_sel);
    let spec_sel = g.constant(spec_sel);
    let class_rows = g.matmul(class_sel, p_rows);
    let class_emb = nn::dense(g, bind, "dec.in", class_rows);
    let spec_table = bind.id("dec.special");
    let spec_emb = g.matmul(spec_sel, spec_table);
    let tok_emb = g.add(class_emb, spec_emb);
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
    let pos_table = bind.id("dec.pos");
    let pos_flat = g.embedding(pos_table, &pos_ids, &[n * l]);
    let x = g.add(tok_emb, pos_flat);
    let mut x = g.reshape(x, &[n, l, dims.model_dim]);

    let causal = g.constant(nn::causal_mask::<T>(l));
    for i in 0..dims.layers {
        x = nn::decoder_layer(g, bind, &format!("dec.l{i}"), x, memory, dims.heads, causal);
    }
    let x = nn::layer_norm(g, bind, "dec.final", x);
    let f = nn::dense(g, bind, "dec.out", x);
    g.l2_normalize_last(f)
}

/// [K+1, C'] logit rows: normalized candidates plus the learned END row.
fn match_rows_node<T: Scalar>(g: &mut Graph<T>, bind: &Binding, p: &CandidateMatrix) -> NodeId {
    let rows = g.constant(Tensor::from_vec(
        &[p.len(), p.dim],
        p.rows_flat().iter().map(|&v| T::from_f32(v)).collect(),
    ));
    let end_raw = bind.id("head.end");
    let end = g.l2_normalize_last(end_raw);
    g.concat_rows(rows, end)
}

// ---------------------------------------------------------------------------
// matching head and loss
// ---------------------------------------------------------------------------

/// Probability over the K candidates for one unit-norm step feature.
/// The same softmax-over-dot-products computation scores training steps.
pub fn matching_head(f_step: &[f32], p: &CandidateMatrix) -> Result<Vec<f32>> {
    if f_step.len() != p.dim {
        return Err(Error::DimensionMismatch(format!(
            "step feature has {} dims, candidates {}",
            f_step.len(),
            p.dim
        )));
    }
    let logits: Vec<f32> = (0..p.len())
        .map(|k| crate::tensor::dot(f_step, p.row(k)))
        .collect();
    Ok(softmax_row(&logits))
}

/// Per-step training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTarget {
    /// index into the logit rows (a candidate index, or K for END)
    Row(usize),
    Pad,
}

/// Mean over non-PAD steps of cross entropy plus beta * ||p_y - f||^2.
/// `f_o` holds raw step features [N, L, C']; they are normalized here, and
/// the squared distance reduces to 2 - 2 cos for the unit rows.
pub fn ctr_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    f_o: NodeId,
    targets: &[Vec<StepTarget>],
    logit_rows: NodeId,
    beta: f64,
    with_reg: bool,
) -> Result<NodeId> {
    let shape = g.shape(f_o).to_vec();
    let (n, l, c) = (shape[0], shape[1], shape[2]);
    let n_rows = g.shape(logit_rows)[0];
    if g.shape(logit_rows)[1] != c {
        return Err(Error::DimensionMismatch(format!(
            "features C'={} vs logit rows C'={}",
            c,
            g.shape(logit_rows)[1]
        )));
    }

    let mut onehot = Tensor::zeros(&[n * l, n_rows]);
    let mut mask = Tensor::zeros(&[n * l]);
    let mut npad = 0usize;
    for (i, row) in targets.iter().enumerate() {
        for (t, &tg) in row.iter().enumerate() {
            let at = i * l + t;
            match tg {
                StepTarget::Row(r) => {
                    if r >= n_rows {
                        return Err(Error::LabelOutOfRange(r, n_rows));
                    }
                    onehot.data[at * n_rows + r] = T::one();
                    mask.data[at] = T::one();
                    npad += 1;
                }
                StepTarget::Pad => {}
            }
        }
    }
    if npad == 0 {
        return Err(Error::EmptyDataset);
    }

    let f = g.l2_normalize_last(f_o);
    let f_flat = g.reshape(f, &[n * l, c]);
    let rows_t = g.permute(logit_rows, &[1, 0]);
    let logits = g.matmul(f_flat, rows_t);
    let onehot = g.constant(onehot);
    let picked = g.mul(logits, onehot);
    let z = g.sum_last(picked);
    let lse = g.logsumexp_last(logits);
    let ce = g.sub(lse, z);
    let per_step = if with_reg && beta > 0.0 {
        // ||p_y - f||^2 = 2 - 2 z for unit p_y and f
        let two = g.constant(Tensor::from_vec(
            &[n * l],
            vec![T::from_f64(2.0); n * l],
        ));
        let negz = g.scale(z, -2.0);
        let r = g.add(two, negz);
        let rb = g.scale(r, beta);
        g.add(ce, rb)
    } else {
        ce
    };
    let mask = g.constant(mask);
    let gated = g.mul(per_step, mask);
    let total = g.sum_all(gated);
    Ok(g.scale(total, 1.0 / npad as f64))
}

/// Plain-tensor version over precomputed step features and a frozen P;
/// logit rows are its candidates plus one explicit END row.
pub fn ctr_loss<T: Scalar>(
    f_o: &Tensor<T>,
    targets: &[Vec<StepTarget>],
    p: &CandidateMatrix,
    end_row: &[f32],
    beta: f64,
) -> Result<T> {
    let mut g = Graph::new();
    let f = g.param(f_o.clone());
    let mut rows = Tensor::from_vec(
        &[p.len() + 1, p.dim],
        p.rows_flat()
            .iter()
            .chain(end_row.iter())
            .map(|&v| T::from_f32(v))
            .collect(),
    );
    crate::tensor::l2_normalize_rows(&mut rows);
    let rows = g.constant(rows);
    let loss = ctr_loss_node(&mut g, f, targets, rows, beta, true)?;
    Ok(g.value(loss).item())
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

fn line_targets(
    labels: &[usize],
    p: &CandidateMatrix,
    padded: usize,
) -> Result<(Vec<DecTok>, Vec<StepTarget>)> {
    let mut input = Vec::with_capacity(padded);
    let mut target = Vec::with_capacity(padded);
    // right-shifted input: BOS + labels predicts labels + END
    input.push(DecTok::Bos);
    for &cid in labels {
        let k = p.index_of(cid).ok_or(Error::CandidateMissing(cid))?;
        target.push(StepTarget::Row(k));
        input.push(DecTok::Class(k));
    }
    target.push(StepTarget::Row(p.len())); // END
    while input.len() < padded {
        input.push(DecTok::Pad);
    }
    while target.len() < padded {
        target.push(StepTarget::Pad);
    }
    Ok((input, target))
}

fn fc_targets(
    labels: &[usize],
    fc_classes: &[usize],
    padded: usize,
    p: &CandidateMatrix,
) -> Result<(Vec<DecTok>, Vec<StepTarget>)> {
    let mut input = vec![DecTok::Bos];
    let mut target = Vec::new();
    for &cid in labels {
        let k = p.index_of(cid).ok_or(Error::CandidateMissing(cid))?;
        let out = fc_classes
            .iter()
            .position(|&c| c == cid)
            .ok_or(Error::CandidateMissing(cid))?;
        target.push(StepTarget::Row(out));
        input.push(DecTok::Class(k));
    }
    target.push(StepTarget::Row(fc_classes.len())); // END
    while input.len() < padded {
        input.push(DecTok::Pad);
    }
    while target.len() < padded {
        target.push(StepTarget::Pad);
    }
    Ok((input, target))
}

/// Teacher-forced training against a frozen candidate matrix. Returns the
/// trained model and a per-epoch mean-loss log. Deterministic per seed.
pub fn train_ctr(
    cfg: &CtrConfig,
    dims: &CtrDims,
    p: &CandidateMatrix,
    data: &[Sample],
) -> Result<(CtrModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if p.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if dims.embed_dim != p.dim {
        return Err(Error::DimensionMismatch(format!(
            "model C'={} vs candidates C'={}",
            dims.embed_dim, p.dim
        )));
    }
    for s in data {
        if s.label.len() + 1 > cfg.max_decode_len {
            return Err(Error::LineTooLong(s.label.len(), cfg.max_decode_len - 1));
        }
        for &cid in &s.label {
            if p.index_of(cid).is_none() {
                return Err(Error::CandidateMissing(cid));
            }
        }
    }
    let fc_classes: Vec<usize> = if cfg.head_mode == HeadMode::Fc {
        let mut cls: Vec<usize> = data.iter().flat_map(|s| s.label.iter().copied()).collect();
        cls.sort_unstable();
        cls.dedup();
        cls
    } else {
        Vec::new()
    };

    let mut model = CtrModel::new(
        dims.clone(),
        cfg.head_mode,
        cfg.max_decode_len,
        fc_classes,
        cfg.seed,
    );
    let mut adam = AdamState::new(&model.params.shapes(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = seed::rng(seed::derive(cfg.seed, "ctr-shuffle"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let pixels_per_line = LINE_HEIGHT * LINE_WIDTH;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let padded = chunk
                .iter()
                .map(|&i| data[i].label.len() + 1)
                .max()
                .unwrap();
            let mut img = Vec::with_capacity(n * pixels_per_line);
            let mut toks = Vec::with_capacity(n);
            let mut tgts = Vec::with_capacity(n);
            for &i in chunk {
                img.extend_from_slice(&data[i].pixels);
                let (tk, tg) = match cfg.head_mode {
                    HeadMode::Match => line_targets(&data[i].label, p, padded)?,
                    HeadMode::Fc => fc_targets(&data[i].label, &model.fc_classes, padded, p)?,
                };
                toks.push(tk);
                tgts.push(tg);
            }

            let mut g: Graph<f32> = Graph::new();
            let (bind, ids) = nn::bind(&mut g, &model.params);
            let lines = g.constant(Tensor::from_vec(&[n, LINE_HEIGHT, LINE_WIDTH, 1], img));
            let memory = encode_lines(&mut g, &bind, &model.dims, lines);
            let f_o = decode_forward(&mut g, &bind, &model.dims, memory, p, &toks);
            let loss = match cfg.head_mode {
                HeadMode::Match => {
                    let rows = match_rows_node(&mut g, &bind, p);
                    ctr_loss_node(&mut g, f_o, &tgts, rows, cfg.beta, true)?
                }
                HeadMode::Fc => {
                    let shape = g.shape(f_o).to_vec();
                    let f = g.reshape(f_o, &[shape[0] * shape[1], shape[2]]);
                    let logits = nn::dense(&mut g, &bind, "head.fc", f);
                    fc_loss_node(&mut g, logits, &tgts)?
                }
            };
            sum += g.value(loss).item() as f64;
            batches += 1;
            g.value(loss).check_finite("ctr loss")?;

            let grads = g.backward(loss);
            let grad_tensors: Vec<Tensor<f32>> = ids
                .iter()
                .zip(&model.params.tensors)
                .map(|(&id, t)| match grads.get(id) {
                    Some(gt) => gt.clone(),
                    None => Tensor::zeros(&t.shape),
                })
                .collect();
            adam.step(&mut model.params.tensors, &grad_tensors)?;
        }
        log.push(sum / batches as f64);
    }
    Ok((model, log))
}

/// Cross entropy over fc-head logits [N*L, K_fc+1]; no regularization term
/// (there are no candidate rows to regularize toward).
fn fc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[Vec<StepTarget>],
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let (rows, n_out) = (shape[0], shape[1]);
    let mut onehot = Tensor::zeros(&[rows, n_out]);
    let mut mask = Tensor::zeros(&[rows]);
    let mut npad = 0usize;
    let l = targets[0].len();
    for (i, trow) in targets.iter().enumerate() {
        for (t, &tg) in trow.iter().enumerate() {
            if let StepTarget::Row(r) = tg {
                if r >= n_out {
                    return Err(Error::LabelOutOfRange(r, n_out));
                }
                onehot.data[(i * l + t) * n_out + r] = T::one();
                mask.data[i * l + t] = T::one();
                npad += 1;
            }
        }
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logits, onehot);
    let z = g.sum_last(picked);
    let lse = g.logsumexp_last(logits);
    let ce = g.sub(lse, z);
    let mask = g.constant(mask);
    let gated = g.mul(ce, mask);
    let total = g.sum_all(gated);
    Ok(g.scale(total, 1.0 / npad as f64))
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    pub classes: Vec<usize>,
    pub truncated: bool,
}

impl CtrModel {
    /// Memory sequence for one line, computed once per decode.
    fn line_memory(&self, pixels: &[f32]) -> Result<Tensor<f32>> {
        if pixels.len() != LINE_HEIGHT * LINE_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} line image",
                LINE_HEIGHT, LINE_WIDTH
            )));
        }
        let mut g = Graph::new();
        let (bind, _) = nn::bind(&mut g, &self.params);
        let lines = g.constant(Tensor::from_vec(
            &[1, LINE_HEIGHT, LINE_WIDTH, 1],
            pixels.to_vec(),
        ));
        let mem = encode_lines(&mut g, &bind, &self.dims, lines);
        Ok(g.value(mem).clone())
    }

    /// Unit-norm step features for a full teacher-forced pass over one line.
    pub fn teacher_forced_features(
        &self,
        pixels: &[f32],
        p: &CandidateMatrix,
        labels: &[usize],
    ) -> Result<Tensor<f32>> {
        let padded = labels.len() + 1;
        let (toks, _) = line_targets(labels, p, padded)?;
        let memory = self.line_memory(pixels)?;
        let mut g = Graph::new();
        let (bind, _) = nn::bind(&mut g, &self.params);
        let mem = g.constant(memory);
        let f = decode_forward(&mut g, &bind, &self.dims, mem, p, &[toks]);
        Ok(g.value(f).clone())
    }

    fn end_row(&self) -> Vec<f32> {
        let raw = self.params.get("head.end");
        let norm: f32 = raw.data.iter().map(|v| v * v).sum::<f32>().sqrt();
        raw.data.iter().map(|v| v / norm.max(1e-12)).collect()
    }

    /// Step logits for the last position of the given prefix.
    fn step_logits(
        &self,
        memory: &Tensor<f32>,
        p: &CandidateMatrix,
        prefix: &[DecTok],
    ) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let (bind, _) = nn::bind(&mut g, &self.params);
        let mem = g.constant(memory.clone());
        let f = decode_forward(&mut g, &bind, &self.dims, mem, p, &[prefix.to_vec()]);
        let c = self.dims.embed_dim;
        let last = &g.value(f).data[(prefix.len() - 1) * c..prefix.len() * c];
        match self.head_mode {
            HeadMode::Match => {
                let mut logits: Vec<f32> = (0..p.len())
                    .map(|k| crate::tensor::dot(last, p.row(k)))
                    .collect();
                logits.push(crate::tensor::dot(last, &self.end_row()));
                Ok(logits)
            }
            HeadMode::Fc => {
                let w = self.params.get("head.fc.w");
                let b = self.params.get("head.fc.b");
                let n_out = w.shape[1];
                let mut logits = vec![0.0f32; n_out];
                for (o, lg) in logits.iter_mut().enumerate() {
                    *lg = b.data[o]
                        + last
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * w.data[i * n_out + o])
                            .sum::<f32>();
                }
                Ok(logits)
            }
        }
    }

    /// Autoregressive argmax decoding: start from BOS, stop at END or the
    /// length limit (sets `truncated`); ties break to the lowest index.
    pub fn greedy_decode(&self, p: &CandidateMatrix, pixels: &[f32]) -> Result<DecodeResult> {
        if p.is_empty() && self.head_mode == HeadMode::Match {
            return Err(Error::EmptyCandidates);
        }
        let memory = self.line_memory(pixels)?;
        let mut prefix = vec![DecTok::Bos];
        let mut classes = Vec::new();
        for _ in 0..self.max_decode_len {
            let logits = self.step_logits(&memory, p, &prefix)?;
            let end_idx = logits.len() - 1;
            let mut best = 0usize;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            if best == end_idx {
                return Ok(DecodeResult {
                    classes,
                    truncated: false,
                });
            }
            let (class_id, k) = match self.head_mode {
                HeadMode::Match => (p.class_ids[best], best),
                HeadMode::Fc => {
                    let cid = self.fc_classes[best];
                    // fc-head classes are always present in P during training
                    let k = p.index_of(cid).ok_or(Error::CandidateMissing(cid))?;
                    (cid, k)
                }
            };
            classes.push(class_id);
            prefix.push(DecTok::Class(k));
        }
        Ok(DecodeResult {
            classes,
            truncated: true,
        })
    }
}

/// Appends encode_text output for a new class to P. No model weights change.
pub fn add_candidate(
    p: &mut CandidateMatrix,
    class_id: usize,
    tokens: &[crate::ids::Token],
    model: &crate::clip::ClipModel,
    lex: &crate::ids::Lexicon,
) -> Result<()> {
    if p.index_of(class_id).is_some() {
        return Err(Error::DuplicateClass(class_id));
    }
    let emb = model.encode_text(lex, tokens)?;
    p.append(class_id, &emb.data)
}

/// Predictions TSV: `sample_id<TAB>space-separated class ids<TAB>truncated`.
pub fn save_predictions(path: &Path, preds: &[(usize, DecodeResult)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, r) in preds {
        let cls = r
            .classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(f, "{}\t{}\t{}", id, cls, r.truncated as u8)?;
    }
    Ok(())
}
