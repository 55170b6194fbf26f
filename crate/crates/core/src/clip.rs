//! Dual-encoder alignment stage: a conv image encoder and a transformer
//! text encoder trained with a symmetric contrastive loss over image/IDS
//! pairs, plus an intra-class image contrastive loss. The frozen text
//! encoder then exports one canonical representation per character class,
//! and single characters are recognized by nearest-candidate matching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Error;
use crate::glyph::{Sample, GLYPH_SIZE};
use crate::ids::{DecompositionLevel, Lexicon, Token};
use crate::seed;
use crate::tensor::nn::{self, Binding, ParamSet};
use crate::tensor::{
    dot, load_checkpoint, save_checkpoint, AdamState, Graph, NodeId, Scalar, Tensor,
};
use crate::Result;

/// Model dimensions. Desk-scale defaults; the reference-scale values are a
/// ResNet-50 backbone and a 12-layer text encoder.
#[derive(Debug, Clone)]
pub struct ClipDims {
    /// alignment dimension C'
    pub embed_dim: usize,
    /// text model width D
    pub text_dim: usize,
    /// transformer encoder depth (reference value 12)
    pub text_layers: usize,
    pub text_heads: usize,
    /// conv block widths; blocks pool except the last, leaving a 1/8-res map
    pub conv_widths: Vec<usize>,
    pub max_seq_len: usize,
}

impl Default for ClipDims {
    fn default() -> Self {
        ClipDims {
            embed_dim: 64,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            conv_widths: vec![16, 32, 64, 64],
            max_seq_len: 24,
        }
    }
}

/// Pre-training settings (reference values: batch 128, lr 1e-4,
/// beta1/beta2 = 0.9/0.98, lambda 1).
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub level: DecompositionLevel,
    /// decoupled weight decay, 0 disables
    pub weight_decay: f64,
    /// train-time probability of blanking a description token (END is kept);
    /// discourages the text encoder from memorizing whole sequences
    pub text_dropout: f64,
    /// fraction of each batch filled with the anchor class's nearest
    /// neighbors by description edit distance; hard negatives concentrate
    /// the contrastive gradient on fine compositional differences
    pub hard_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 1.0,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epochs: 20,
            seed: 0,
            level: DecompositionLevel::Radical,
            weight_decay: 0.0,
            text_dropout: 0.0,
            hard_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClipModel {
    pub dims: ClipDims,
    pub vocab_size: usize,
    pub params: ParamSet<f32>,
}

impl ClipModel {
    pub fn new(dims: ClipDims, vocab_size: usize, seed_v: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed_v, "init"));
        let mut p = ParamSet::new();
        let mut cin = 1;
        for (i, &w) in dims.conv_widths.iter().enumerate() {
            p.add_conv(&format!("img.c{i}"), cin, w, &mut rng);
            p.add_layer_norm(&format!("img.c{i}.ln"), w);
            cin = w;
        }
        p.add_dense("img.proj", cin, dims.embed_dim, &mut rng);

        p.add_embedding("txt.tok", vocab_size, dims.text_dim, &mut rng);
        p.add_embedding("txt.pos", dims.max_seq_len, dims.text_dim, &mut rng);
        for i in 0..dims.text_layers {
            p.add_encoder_layer(&format!("txt.l{i}"), dims.text_dim, dims.text_dim * 2, &mut rng);
        }
        p.add_layer_norm("txt.final", dims.text_dim);
        p.add_dense("txt.proj", dims.text_dim, dims.embed_dim, &mut rng);

        ClipModel {
            dims,
            vocab_size,
            params: p,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = vec![("__meta__".to_string(), self.meta_tensor())];
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
        if m.len() < 7 {
            return Err(Error::Checkpoint("bad __meta__".into()));
        }
        let dims = ClipDims {
            embed_dim: m[0],
            text_dim: m[1],
            text_layers: m[2],
            text_heads: m[3],
            max_seq_len: m[4],
            conv_widths: m[6..6 + m[5]].to_vec(),
        };
        let vocab_size = m[6 + m[5]];
        let mut model = ClipModel::new(dims, vocab_size, 0);
        let rest: Vec<(String, Tensor<f32>)> = entries
            .into_iter()
            .filter(|(n, _)| n != "__meta__")
            .collect();
        model.params.load_from(&rest)?;
        Ok(model)
    }

    fn meta_tensor(&self) -> Tensor<f32> {
        let d = &self.dims;
        let mut m = vec![
            d.embed_dim,
            d.text_dim,
            d.text_layers,
            d.text_heads,
            d.max_seq_len,
            d.conv_widths.len(),
        ];
        m.extend(&d.conv_widths);
        m.push(self.vocab_size);
        Tensor::from_vec(&[m.len()], m.into_iter().map(|v| v as f32).collect())
    }
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Image batch [N, 32, 32, 1] -> unit-norm embeddings [N, C'].
pub fn image_forward<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    dims: &ClipDims,
    images: NodeId,
) -> NodeId {
    let n_blocks = dims.conv_widths.len();
    let mut x = images;
    for i in 0..n_blocks {
        let pool = i + 1 < n_blocks;
        x = nn::conv_block(g, bind, &format!("img.c{i}"), x, 1, pool);
    }
    let pooled = g.global_avg_pool(x);
    let proj = nn::dense(g, bind, "img.proj", pooled);
    g.l2_normalize_last(proj)
}

/// Padded token-id batch -> unit-norm embeddings [N, C'] taken at each
/// sequence's END position.
pub fn text_forward<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    dims: &ClipDims,
    ids: &[usize],
    lengths: &[usize],
    padded_len: usize,
) -> NodeId {
    let n = lengths.len();
    let tok_table = bind.id("txt.tok");
    let pos_table = bind.id("txt.pos");
    let tok = g.embedding(tok_table, ids, &[n, padded_len]);
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..padded_len).collect();
    let pos = g.embedding(pos_table, &pos_ids, &[n, padded_len]);
    let mut x = g.add(tok, pos);
    let mask = g.constant(nn::padding_mask::<T>(lengths, padded_len, dims.text_heads));
    for i in 0..dims.text_layers {
        x = nn::encoder_layer(g, bind, &format!("txt.l{i}"), x, dims.text_heads, Some(mask));
    }
    let x = nn::layer_norm(g, bind, "txt.final", x);
    let ends: Vec<usize> = lengths.iter().map(|&l| l - 1).collect();
    let at_end = g.select_positions(x, &ends);
    let proj = nn::dense(g, bind, "txt.proj", at_end);
    g.l2_normalize_last(proj)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Symmetric contrastive alignment loss over the N x N similarity matrix:
/// row- and column-wise cross entropy against the diagonal, summed.
pub fn loss_lt_node<T: Scalar>(g: &mut Graph<T>, i_batch: NodeId, t_batch: NodeId) -> NodeId {
    let n = g.shape(i_batch)[0];
    let tt = g.permute(t_batch, &[1, 0]);
    let s = g.matmul(i_batch, tt);
    let lse_rows = g.logsumexp_last(s);
    let row_term = g.sum_all(lse_rows);
    let st = g.permute(s, &[1, 0]);
    let lse_cols = g.logsumexp_last(st);
    let col_term = g.sum_all(lse_cols);
    let eye = {
        let mut e = Tensor::zeros(&[n, n]);
        for i in 0..n {
            e.data[i * n + i] = T::one();
        }
        g.constant(e)
    };
    let diag = g.mul(s, eye);
    let trace = g.sum_all(diag);
    let sum = g.add(row_term, col_term);
    let neg2tr = g.scale(trace, -2.0);
    g.add(sum, neg2tr)
}

/// Intra-class image contrastive loss: for each sample, the same-label
/// summed-exponential mass (self excluded) against the full-batch mass
/// (self included). Samples with no same-label partner contribute 0.
pub fn loss_li_node<T: Scalar>(g: &mut Graph<T>, i_batch: NodeId, labels: &[usize]) -> NodeId {
    let n = labels.len();
    let it = g.permute(i_batch, &[1, 0]);
    let s = g.matmul(i_batch, it);
    let lse_den = g.logsumexp_last(s);

    let mut num_mask = Tensor::zeros(&[n, n]);
    let mut active = vec![T::zero(); n];
    for j in 0..n {
        for k in 0..n {
            if k != j && labels[k] == labels[j] {
                num_mask.data[j * n + k] = T::one();
                active[j] = T::one();
            }
        }
    }
    let num_mask = g.constant(num_mask);
    let exp_s = g.exp(s);
    let masked = g.mul(exp_s, num_mask);
    let num_sum = g.sum_last(masked);
    // rows with empty U_j get numerator 1 (log 0 avoided) and are zeroed out
    let inactive = {
        let data: Vec<T> = active.iter().map(|&a| T::one() - a).collect();
        g.constant(Tensor::from_vec(&[n], data))
    };
    let safe_num = g.add(num_sum, inactive);
    let log_num = g.ln(safe_num);
    let per_row = g.sub(lse_den, log_num);
    let active = g.constant(Tensor::from_vec(&[n], active));
    let gated = g.mul(per_row, active);
    g.sum_all(gated)
}

fn check_unit_batch<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("{what}: expected 2-D batch")));
    }
    t.check_finite(what)
}

/// Eq.-style alignment loss over plain tensors (rows must be unit-norm).
pub fn loss_lt<T: Scalar>(i_batch: &Tensor<T>, t_batch: &Tensor<T>) -> Result<T> {
    check_unit_batch(i_batch, "loss_lt I")?;
    check_unit_batch(t_batch, "loss_lt T")?;
    if i_batch.shape != t_batch.shape || i_batch.shape[0] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "loss_lt: I {:?} vs T {:?}",
            i_batch.shape, t_batch.shape
        )));
    }
    let mut g = Graph::new();
    let i = g.constant(i_batch.clone());
    let t = g.param(t_batch.clone());
    let l = loss_lt_node(&mut g, i, t);
    Ok(g.value(l).item())
}

/// Intra-class loss over plain tensors.
pub fn loss_li<T: Scalar>(i_batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_unit_batch(i_batch, "loss_li I")?;
    if i_batch.shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss_li: {} rows vs {} labels",
            i_batch.shape[0],
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let i = g.param(i_batch.clone());
    let l = loss_li_node(&mut g, i, labels);
    Ok(g.value(l).item())
}

// ---------------------------------------------------------------------------
// encoding and recognition
// ---------------------------------------------------------------------------

fn tokens_to_ids(lex: &Lexicon, tokens: &[Token]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            let idx = lex.token_index(t);
            if idx >= lex.vocab_size() {
                Err(Error::UnknownToken(t.to_string()))
            } else {
                Ok(idx)
            }
        })
        .collect()
}

impl ClipModel {
    /// Unit-norm embedding of one 32x32 glyph (inference mode).
    pub fn encode_image(&self, pixels: &[f32]) -> Result<Tensor<f32>> {
        let batch = self.encode_images(&[pixels])?;
        Ok(Tensor::from_vec(&[self.dims.embed_dim], batch.data))
    }

    pub fn encode_images(&self, images: &[&[f32]]) -> Result<Tensor<f32>> {
        let n = images.len();
        for img in images {
            if img.len() != GLYPH_SIZE * GLYPH_SIZE {
                return Err(Error::ShapeMismatch(format!(
                    "expected {}x{} glyph",
                    GLYPH_SIZE, GLYPH_SIZE
                )));
            }
        }
        let mut data = Vec::with_capacity(n * GLYPH_SIZE * GLYPH_SIZE);
        for img in images {
            data.extend_from_slice(img);
        }
        let input = Tensor::from_vec(&[n, GLYPH_SIZE, GLYPH_SIZE, 1], data);
        input.check_finite("encode_image input")?;
        let mut g = Graph::new();
        let (bind, _) = nn::bind(&mut g, &self.params);
        let x = g.constant(input);
        let emb = image_forward(&mut g, &bind, &self.dims, x);
        let out = g.value(emb).clone();
        out.check_finite("encode_image output")?;
        Ok(out)
    }

    /// Unit-norm embedding of one token sequence ending in END.
    pub fn encode_text(&self, lex: &Lexicon, tokens: &[Token]) -> Result<Tensor<f32>> {
        let batch = self.encode_texts(lex, &[tokens.to_vec()])?;
        Ok(Tensor::from_vec(&[self.dims.embed_dim], batch.data))
    }

    pub fn encode_texts(&self, lex: &Lexicon, seqs: &[Vec<Token>]) -> Result<Tensor<f32>> {
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.last() != Some(&Token::End) {
                return Err(Error::MalformedIds("sequence must end with END".into()));
            }
            if s.len() > self.dims.max_seq_len {
                return Err(Error::SequenceTooLong(s.len(), self.dims.max_seq_len));
            }
            lengths.push(s.len());
        }
        let padded = *lengths.iter().max().unwrap();
        let pad_id = lex.token_index(Token::Pad);
        let mut ids = Vec::with_capacity(seqs.len() * padded);
        for s in seqs {
            let mut row = tokens_to_ids(lex, s)?;
            row.resize(padded, pad_id);
            ids.extend(row);
        }
        let mut g = Graph::new();
        let (bind, _) = nn::bind(&mut g, &self.params);
        let emb = text_forward(&mut g, &bind, &self.dims, &ids, &lengths, padded);
        let out = g.value(emb).clone();
        out.check_finite("encode_text output")?;
        Ok(out)
    }
}

/// K x C' matrix of canonical representations, extensible by append only.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatrix {
    pub class_ids: Vec<usize>,
    pub dim: usize,
    rows: Vec<f32>,
}

impl CandidateMatrix {
    pub fn new(dim: usize) -> Self {
        CandidateMatrix {
            class_ids: Vec::new(),
            dim,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn append(&mut self, class_id: usize, embedding: &[f32]) -> Result<()> {
        if self.index_of(class_id).is_some() {
            return Err(Error::DuplicateClass(class_id));
        }
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "candidate row has {} dims, matrix {}",
                embedding.len(),
                self.dim
            )));
        }
        self.class_ids.push(class_id);
        self.rows.extend_from_slice(embedding);
        Ok(())
    }

    /// TSV: `class_id<TAB>C' tab-separated floats`, one row per candidate.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, &cid) in self.class_ids.iter().enumerate() {
            let vals = self
                .row(k)
                .iter()
                .map(|v| format!("{:e}", v))
                .collect::<Vec<_>>()
                .join("\t");
            writeln!(f, "{}\t{}", cid, vals)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut out: Option<CandidateMatrix> = None;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let cid: usize = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::parse(&name, ln + 1, "bad class id"))?;
            let vals: Vec<f32> = cols
                .map(|c| c.parse::<f32>().map_err(|_| Error::parse(&name, ln + 1, "bad float")))
                .collect::<Result<_>>()?;
            let m = out.get_or_insert_with(|| CandidateMatrix::new(vals.len()));
            m.append(cid, &vals)
                .map_err(|e| Error::parse(&name, ln + 1, e.to_string()))?;
        }
        out.ok_or(Error::EmptyCandidates)
    }
}

/// Canonical representations for the given classes; rows follow `classes`
/// order and are frozen after export.
pub fn export_candidates(
    model: &ClipModel,
    lex: &Lexicon,
    classes: &[usize],
    level: DecompositionLevel,
) -> Result<CandidateMatrix> {
    let mut m = CandidateMatrix::new(model.dims.embed_dim);
    let seqs: Vec<Vec<Token>> = classes
        .iter()
        .map(|&c| lex.tokens_for_level(c, level))
        .collect::<Result<_>>()?;
    // batch in chunks to bound the padded width
    for (chunk_cls, chunk_seq) in classes.chunks(64).zip(seqs.chunks(64)) {
        let emb = model.encode_texts(lex, chunk_seq)?;
        for (i, &cid) in chunk_cls.iter().enumerate() {
            m.append(cid, emb.row(i))?;
        }
    }
    Ok(m)
}

/// Nearest-candidate classification of one glyph; ties break to the lowest
/// class index.
pub fn ccr_recognize(model: &ClipModel, img: &[f32], p: &CandidateMatrix) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let emb = model.encode_image(img)?;
    Ok(nearest_candidate(&emb.data, p))
}

pub fn nearest_candidate(embedding: &[f32], p: &CandidateMatrix) -> usize {
    let mut best = 0usize;
    let mut best_score = f32::NEG_INFINITY;
    for k in 0..p.len() {
        let s = dot(embedding, p.row(k));
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    p.class_ids[best]
}

// ---------------------------------------------------------------------------
// pre-training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub lt: f64,
    pub li: f64,
    pub lpre: f64,
}

/// Minimize L_T + lambda * L_I by mini-batch Adam. When lambda > 0, batches
/// pair two style draws per sampled class so every sample has an intra-class
/// partner. Deterministic given the config seed.
pub fn pretrain(
    model: &mut ClipModel,
    lex: &Lexicon,
    data: &[Sample],
    cfg: &PretrainConfig,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in data.iter().enumerate() {
        if s.label.len() != 1 {
            return Err(Error::ShapeMismatch("pretrain expects single-glyph samples".into()));
        }
        let cid = s.label[0];
        if cid >= lex.class_count() {
            return Err(Error::UnknownClass(cid));
        }
        by_class.entry(cid).or_default().push(i);
    }
    let class_list: Vec<usize> = by_class.keys().copied().collect();
    let token_ids: std::collections::BTreeMap<usize, (Vec<usize>, usize)> = class_list
        .iter()
        .map(|&c| {
            let toks = lex.tokens_for_level(c, cfg.level)?;
            if toks.len() > model.dims.max_seq_len {
                return Err(Error::SequenceTooLong(toks.len(), model.dims.max_seq_len));
            }
            let ids = tokens_to_ids(lex, &toks)?;
            let l = ids.len();
            Ok((c, (ids, l)))
        })
        .collect::<Result<_>>()?;
    let pad_id = lex.token_index(Token::Pad);

    let mut adam = AdamState::new(&model.params.shapes(), cfg.lr, cfg.beta1, cfg.beta2);
    adam.weight_decay = cfg.weight_decay;

    // neighbor lists for hard-negative batches, nearest description first
    let neighbors: Vec<Vec<usize>> = if cfg.lambda > 0.0 && cfg.hard_frac > 0.0 {
        class_list
            .iter()
            .map(|&c| {
                let a = &token_ids[&c].0;
                let mut ds: Vec<(usize, usize)> = class_list
                    .iter()
                    .filter(|&&o| o != c)
                    .map(|&o| (crate::eval::edit_distance(a, &token_ids[&o].0), o))
                    .collect();
                ds.sort_unstable();
                ds.into_iter().map(|(_, o)| o).collect()
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut rng = seed::rng(seed::derive(cfg.seed, "shuffle"));
    let steps = data.len().div_ceil(cfg.batch_size).max(1);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // cosine decay from the configured initial rate; the small-step tail
        // is what separates near-duplicate compositions
        adam.lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let mut sums = EpochStats {
            lt: 0.0,
            li: 0.0,
            lpre: 0.0,
        };
        for _step in 0..steps {
            // batch composition
            let batch: Vec<usize> = if cfg.lambda > 0.0 {
                let take = (cfg.batch_size / 2).min(class_list.len());
                let chosen: Vec<usize> = if cfg.hard_frac > 0.0 {
                    // one anchor, its nearest descriptions, random filler
                    let ai = rng.gen_range(0..class_list.len());
                    let n_hard = (((take - 1) as f64) * cfg.hard_frac).round() as usize;
                    let mut set = vec![class_list[ai]];
                    set.extend(neighbors[ai].iter().take(n_hard.min(take - 1)).copied());
                    let mut pool: Vec<usize> = class_list
                        .iter()
                        .copied()
                        .filter(|c| !set.contains(c))
                        .collect();
                    pool.shuffle(&mut rng);
                    set.extend(pool.into_iter().take(take - set.len()));
                    set
                } else {
                    let mut cls = class_list.clone();
                    cls.shuffle(&mut rng);
                    cls.truncate(take);
                    cls
                };
                let mut b = Vec::with_capacity(take * 2);
                for &c in chosen.iter() {
                    let samples = &by_class[&c];
                    let a = samples[rng.gen_range(0..samples.len())];
                    let mut d = samples[rng.gen_range(0..samples.len())];
                    if samples.len() > 1 {
                        while d == a {
                            d = samples[rng.gen_range(0..samples.len())];
                        }
                    }
                    b.push(a);
                    b.push(d);
                }
                b
            } else {
                (0..cfg.batch_size)
                    .map(|_| rng.gen_range(0..data.len()))
                    .collect()
            };
            let n = batch.len();

            let mut img_data = Vec::with_capacity(n * GLYPH_SIZE * GLYPH_SIZE);
            let mut labels = Vec::with_capacity(n);
            let mut lengths = Vec::with_capacity(n);
            for &i in &batch {
                img_data.extend_from_slice(&data[i].pixels);
                labels.push(data[i].label[0]);
                lengths.push(token_ids[&data[i].label[0]].1);
            }
            let padded = *lengths.iter().max().unwrap();
            let mut ids = Vec::with_capacity(n * padded);
            for &c in &labels {
                let (row, l) = &token_ids[&c];
                if cfg.text_dropout > 0.0 {
                    // blank description tokens at random; END stays, since the
                    // encoder reads out at its position
                    for (k, &t) in row.iter().enumerate() {
                        let blank = k + 1 < *l && rng.gen_bool(cfg.text_dropout);
                        ids.push(if blank { pad_id } else { t });
                    }
                } else {
                    ids.extend(row);
                }
                ids.extend(std::iter::repeat(pad_id).take(padded - l));
            }

            let mut g: Graph<f32> = Graph::new();
            let (bind, order) = nn::bind(&mut g, &model.params);
            let imgs = g.constant(Tensor::from_vec(&[n, GLYPH_SIZE, GLYPH_SIZE, 1], img_data));
            let i_emb = image_forward(&mut g, &bind, &model.dims, imgs);
            let t_emb = text_forward(&mut g, &bind, &model.dims, &ids, &lengths, padded);
            let lt = loss_lt_node(&mut g, i_emb, t_emb);
            let loss = if cfg.lambda > 0.0 {
                let li = loss_li_node(&mut g, i_emb, &labels);
                let scaled = g.scale(li, cfg.lambda);
                sums.li += g.value(li).item().to_f64();
                g.add(lt, scaled)
            } else {
                lt
            };
            sums.lt += g.value(lt).item().to_f64();
            sums.lpre += g.value(loss).item().to_f64();
            g.value(loss).check_finite("pretrain loss")?;

            let grads = g.backward(loss);
            let grad_tensors: Vec<Tensor<f32>> = order
                .iter()
                .zip(&model.params.tensors)
                .map(|(&id, t)| match grads.get(id) {
                    Some(gt) => gt.clone(),
                    None => Tensor::zeros(&t.shape),
                })
                .collect();
            adam.step(&mut model.params.tensors, &grad_tensors)?;
        }
        log.push(EpochStats {
            lt: sums.lt / steps as f64,
            li: sums.li / steps as f64,
            lpre: sums.lpre / steps as f64,
        });
    }
    Ok(log)
}

/// Training log TSV: `epoch<TAB>L_T<TAB>L_I<TAB>L_pre`.
pub fn save_train_log(path: &Path, log: &[EpochStats]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (e, s) in log.iter().enumerate() {
        writeln!(f, "{}\t{:.6}\t{:.6}\t{:.6}", e + 1, s.lt, s.li, s.lpre)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph;
    use crate::ids::generate_lexicon;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor<f64> {
        let d = rows[0].len();
        let mut t = Tensor::from_vec(
            &[rows.len(), d],
            rows.iter().flatten().copied().collect(),
        );
        crate::tensor::l2_normalize_rows(&mut t);
        t
    }

    #[test]
    fn loss_lt_single_sample_is_zero() {
        let i = unit_rows(&[vec![1.0, 0.0]]);
        assert!(loss_lt(&i, &i).unwrap().abs() < 1e-9);
    }

    #[test]
    fn loss_lt_orthonormal_pair() {
        let i = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = loss_lt(&i, &i).unwrap();
        let expect = 4.0 * (-(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln());
        assert!((v - expect).abs() < 1e-9);
        assert!((v - 1.2530).abs() < 1e-3);
    }

    #[test]
    fn loss_lt_all_identical() {
        let i = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let v = loss_lt(&i, &i).unwrap();
        assert!((v - 4.0 * (2.0f64).ln()).abs() < 1e-9);
        assert!((v - 2.7726).abs() < 1e-3);
    }

    #[test]
    fn loss_li_examples() {
        // all labels distinct -> 0
        let i = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(loss_li(&i, &[0, 1]).unwrap(), 0.0);

        // same label, identical embeddings -> 2 log 2
        let i = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let v = loss_li(&i, &[5, 5]).unwrap();
        assert!((v - 2.0 * (2.0f64).ln()).abs() < 1e-9);
        assert!((v - 1.3863).abs() < 1e-3);

        // same label, antipodal embeddings -> 2 * log(1 + e^2)
        let i = unit_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let v = loss_li(&i, &[5, 5]).unwrap();
        let per_term = (1.0 + (2.0f64).exp()).ln();
        assert!((v - 2.0 * per_term).abs() < 1e-9);
        assert!((per_term - 2.1269).abs() < 1e-3);
        assert!((v - 4.2538).abs() < 1e-3);
    }

    #[test]
    fn losses_invariant_under_joint_permutation() {
        let mut rng = seed::rng(3);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = [0usize, 1, 0, 2, 1, 2];
        let i = unit_rows(&rows);
        let t = unit_rows(&rows.iter().rev().cloned().collect::<Vec<_>>());
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
        let permuted_t_rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&p| rows.iter().rev().cloned().collect::<Vec<_>>()[p].clone())
            .collect();
        let permuted_labels: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let ip = unit_rows(&permuted_rows);
        let tp = unit_rows(&permuted_t_rows);
        assert!((loss_lt(&i, &t).unwrap() - loss_lt(&ip, &tp).unwrap()).abs() < 1e-9);
        assert!((loss_li(&i, &labels).unwrap() - loss_li(&ip, &permuted_labels).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_lt_strictly_positive_for_n_ge_2() {
        let mut rng = seed::rng(9);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let i = unit_rows(&rows);
            assert!(loss_lt(&i, &i).unwrap() > 0.0);
        }
    }

    #[test]
    fn random_unit_embeddings_lt_near_2n_log_n() {
        // Monte-Carlo sanity: random unit embeddings give L_T/(2N) ~ log N
        let n = 32;
        let c = 64;
        let mut total = 0.0;
        let mut rng = seed::rng(21);
        let trials = 100;
        for _ in 0..trials {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let t_rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            total += loss_lt(&unit_rows(&rows), &unit_rows(&t_rows)).unwrap() / (2.0 * n as f64);
        }
        let mean = total / trials as f64;
        let logn = (n as f64).ln();
        assert!(
            (mean - logn).abs() / logn < 0.15,
            "mean {} vs log N {}",
            mean,
            logn
        );
    }

    #[test]
    fn grad_of_losses_vs_finite_differences() {
        // composite-loss gradient check in f64 on minimal shapes
        let mut rng = seed::rng(31);
        let n = 4;
        let c = 6;
        let raw: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0usize, 0, 1, 2];
        let lambda = 1.0;

        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[n, c], vals.to_vec()));
            let t = g.constant({
                let mut t = Tensor::from_vec(&[n, c], (0..n * c).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect());
                crate::tensor::l2_normalize_rows(&mut t);
                t
            });
            let i = g.l2_normalize_last(x);
            let lt = loss_lt_node(&mut g, i, t);
            let li = loss_li_node(&mut g, i, &labels);
            let sl = g.scale(li, lambda);
            let loss = g.add(lt, sl);
            g.value(loss).item()
        };

        // analytic
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[n, c], raw.clone()));
        let t = g.constant({
            let mut t = Tensor::from_vec(&[n, c], (0..n * c).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect());
            crate::tensor::l2_normalize_rows(&mut t);
            t
        });
        let i = g.l2_normalize_last(x);
        let lt = loss_lt_node(&mut g, i, t);
        let li = loss_li_node(&mut g, i, &labels);
        let sl = g.scale(li, lambda);
        let loss = g.add(lt, sl);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap();

        let h = 1e-5;
        for e in 0..raw.len() {
            let mut plus = raw.clone();
            plus[e] += h;
            let mut minus = raw.clone();
            minus[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "elem {}: {} vs {}", e, a, numeric);
        }
    }

    fn toy_setup(classes: usize, seed_v: u64) -> (Lexicon, Vec<glyph::RadicalBitmap>, Vec<Sample>) {
        let lex = generate_lexicon(classes, 10, 3, seed_v);
        let bitmaps = glyph::radical_inventory(10);
        let mut samples = Vec::new();
        for c in 0..classes {
            for i in 0..3 {
                let s = seed::sample_seed(seed_v, c, i);
                let mut rng = seed::rng(s);
                let style = glyph::StyleParams::sample(glyph::StyleRegime::Printed, &mut rng);
                let img = glyph::glyph_for_class(&lex, &bitmaps, c, &style, s).unwrap();
                samples.push(Sample {
                    pixels: img.pixels,
                    label: vec![c],
                });
            }
        }
        (lex, bitmaps, samples)
    }

    #[test]
    fn encode_contracts() {
        let (lex, _bm, _samples) = toy_setup(6, 2);
        let model = ClipModel::new(
            ClipDims {
                conv_widths: vec![8, 16],
                ..Default::default()
            },
            lex.vocab_size(),
            7,
        );
        let img = vec![0.3f32; GLYPH_SIZE * GLYPH_SIZE];
        let e1 = model.encode_image(&img).unwrap();
        let e2 = model.encode_image(&img).unwrap();
        assert_eq!(e1.data, e2.data);
        let norm: f32 = e1.data.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        let toks = lex.tokens_for_level(0, DecompositionLevel::Radical).unwrap();
        let t1 = model.encode_text(&lex, &toks).unwrap();
        let t2 = model.encode_text(&lex, &toks).unwrap();
        assert_eq!(t1.data, t2.data);
        let norm: f32 = t1.data.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        // missing END
        let no_end = &toks[..toks.len() - 1];
        assert!(model.encode_text(&lex, no_end).is_err());
        // too long
        let long: Vec<Token> = std::iter::repeat(Token::Radical(crate::ids::RadicalId(0)))
            .take(30)
            .chain([Token::End])
            .collect();
        assert!(matches!(
            model.encode_text(&lex, &long),
            Err(Error::SequenceTooLong(31, _))
        ));
    }

    #[test]
    fn candidate_matrix_contracts() {
        let (lex, _bm, _s) = toy_setup(5, 3);
        let model = ClipModel::new(
            ClipDims {
                conv_widths: vec![8, 16],
                ..Default::default()
            },
            lex.vocab_size(),
            1,
        );
        let classes: Vec<usize> = lex.classes().collect();
        let p = export_candidates(&model, &lex, &classes, DecompositionLevel::Radical).unwrap();
        assert_eq!(p.len(), 5);
        for k in 0..p.len() {
            let norm: f32 = p.row(k).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        let p2 = export_candidates(&model, &lex, &classes, DecompositionLevel::Radical).unwrap();
        assert_eq!(p, p2);

        // append keeps existing rows untouched
        let mut p3 = p.clone();
        let extra = model
            .encode_text(&lex, &lex.tokens_for_level(0, DecompositionLevel::Radical).unwrap())
            .unwrap();
        p3.append(99, &extra.data).unwrap();
        assert_eq!(p3.len(), 6);
        for k in 0..5 {
            assert_eq!(p3.row(k), p.row(k));
        }
        assert!(matches!(
            p3.append(99, &extra.data),
            Err(Error::DuplicateClass(99))
        ));

        // TSV round trip
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("candidates.tsv");
        p3.save(&path).unwrap();
        let back = CandidateMatrix::load(&path).unwrap();
        assert_eq!(back.class_ids, p3.class_ids);
        for k in 0..back.len() {
            for (a, b) in back.row(k).iter().zip(p3.row(k)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn recognize_matches_brute_force_and_tie_rule() {
        let dim = 8;
        let mut p = CandidateMatrix::new(dim);
        let mut rng = seed::rng(17);
        let mut rows = Vec::new();
        for c in 0..10 {
            let mut row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
            p.append(c, &row).unwrap();
            rows.push(row);
        }
        for _ in 0..100 {
            let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let fast = nearest_candidate(&q, &p);
            let brute = (0..10)
                .max_by(|&a, &b| {
                    dot(&q, &rows[a]).partial_cmp(&dot(&q, &rows[b])).unwrap()
                })
                .unwrap();
            assert_eq!(fast, brute);
            // positive rescaling invariance
            let q2: Vec<f32> = q.iter().map(|v| v * 3.5).collect();
            assert_eq!(nearest_candidate(&q2, &p), fast);
        }
        // two identical maximal rows -> lower class index
        let mut tie = CandidateMatrix::new(2);
        tie.append(4, &[1.0, 0.0]).unwrap();
        tie.append(2, &[1.0, 0.0]).unwrap();
        // scan order follows insertion; equal scores keep the first row,
        // rows are ordered by class id at export time
        assert_eq!(nearest_candidate(&[1.0, 0.0], &tie), 4);
        let mut ordered = CandidateMatrix::new(2);
        ordered.append(2, &[1.0, 0.0]).unwrap();
        ordered.append(4, &[1.0, 0.0]).unwrap();
        assert_eq!(nearest_candidate(&[1.0, 0.0], &ordered), 2);
    }

    #[test]
    fn pretrain_loss_decreases_on_toy_run() {
        let (lex, _bm, samples) = toy_setup(12, 5);
        let mut model = ClipModel::new(
            ClipDims {
                embed_dim: 16,
                text_dim: 16,
                text_layers: 1,
                text_heads: 2,
                conv_widths: vec![8, 16],
                max_seq_len: 24,
            },
            lex.vocab_size(),
            7,
        );
        let cfg = PretrainConfig {
            batch_size: 12,
            epochs: 5,
            lr: 1e-3,
            seed: 7,
            ..Default::default()
        };
        let log = pretrain(&mut model, &lex, &samples, &cfg).unwrap();
        assert_eq!(log.len(), 5);
        assert!(
            log[4].lpre < log[0].lpre,
            "epoch5 {} !< epoch1 {}",
            log[4].lpre,
            log[0].lpre
        );
    }

    #[test]
    fn pretrain_lambda_zero_reduces_to_lt() {
        let (lex, _bm, samples) = toy_setup(6, 6);
        let mut model = ClipModel::new(
            ClipDims {
                embed_dim: 8,
                text_dim: 8,
                text_layers: 1,
                text_heads: 2,
                conv_widths: vec![4],
                max_seq_len: 24,
            },
            lex.vocab_size(),
            3,
        );
        let cfg = PretrainConfig {
            lambda: 0.0,
            batch_size: 6,
            epochs: 1,
            seed: 3,
            ..Default::default()
        };
        let log = pretrain(&mut model, &lex, &samples, &cfg).unwrap();
        assert!((log[0].lpre - log[0].lt).abs() < 1e-9);
        assert_eq!(log[0].li, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let (lex, _bm, _s) = toy_setup(4, 8);
        let model = ClipModel::new(
            ClipDims {
                conv_widths: vec![8, 16],
                ..Default::default()
            },
            lex.vocab_size(),
            11,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.ckpt");
        model.save(&path).unwrap();
        let back = ClipModel::load(&path).unwrap();
        let img = vec![0.5f32; GLYPH_SIZE * GLYPH_SIZE];
        let a = model.encode_image(&img).unwrap();
        let b = back.encode_image(&img).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
