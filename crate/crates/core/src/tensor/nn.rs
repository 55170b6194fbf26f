//! Layer and parameter plumbing on top of the autodiff graph: named
//! parameter sets, fan-in-scaled init, dense/conv blocks, multi-head
//! attention and transformer layers.

use std::collections::HashMap;

use rand::Rng;

use super::{Graph, NodeId, Scalar, Tensor};

/// Ordered, named parameter tensors. Order is the registration order and is
/// what Adam moments and checkpoints key on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate param {}", name);
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = self.names.iter().position(|n| n == name).expect("param name");
        &self.tensors[i]
    }

    /// Fan-in-scaled uniform init: U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
    pub fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::from_vec(shape, data));
    }

    pub fn add_dense<R: Rng>(&mut self, prefix: &str, din: usize, dout: usize, rng: &mut R) {
        self.add_init(format!("{prefix}.w"), &[din, dout], din, rng);
        self.push(format!("{prefix}.b"), Tensor::zeros(&[1, dout]));
    }

    pub fn add_layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(
            format!("{prefix}.g"),
            Tensor::from_vec(&[d], vec![T::one(); d]),
        );
        self.push(format!("{prefix}.b"), Tensor::zeros(&[d]));
    }

    pub fn add_conv<R: Rng>(&mut self, prefix: &str, cin: usize, cout: usize, rng: &mut R) {
        self.add_init(format!("{prefix}.w"), &[3, 3, cin, cout], 9 * cin, rng);
        self.push(format!("{prefix}.b"), Tensor::zeros(&[1, 1, 1, cout]));
    }

    pub fn add_embedding<R: Rng>(&mut self, name: &str, vocab: usize, d: usize, rng: &mut R) {
        self.add_init(name, &[vocab, d], d, rng);
    }

    pub fn add_mha<R: Rng>(&mut self, prefix: &str, d: usize, rng: &mut R) {
        for part in ["wq", "wk", "wv", "wo"] {
            self.add_dense(&format!("{prefix}.{part}"), d, d, rng);
        }
    }

    pub fn add_encoder_layer<R: Rng>(&mut self, prefix: &str, d: usize, ff: usize, rng: &mut R) {
        self.add_layer_norm(&format!("{prefix}.ln1"), d);
        self.add_mha(&format!("{prefix}.attn"), d, rng);
        self.add_layer_norm(&format!("{prefix}.ln2"), d);
        self.add_dense(&format!("{prefix}.ff1"), d, ff, rng);
        self.add_dense(&format!("{prefix}.ff2"), ff, d, rng);
    }

    pub fn add_decoder_layer<R: Rng>(&mut self, prefix: &str, d: usize, ff: usize, rng: &mut R) {
        self.add_layer_norm(&format!("{prefix}.ln1"), d);
        self.add_mha(&format!("{prefix}.self"), d, rng);
        self.add_layer_norm(&format!("{prefix}.ln2"), d);
        self.add_mha(&format!("{prefix}.cross"), d, rng);
        self.add_layer_norm(&format!("{prefix}.ln3"), d);
        self.add_dense(&format!("{prefix}.ff1"), d, ff, rng);
        self.add_dense(&format!("{prefix}.ff2"), ff, d, rng);
    }

    pub fn to_checkpoint(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.to_f32_tensor()))
            .collect()
    }

    pub fn load_from(&mut self, entries: &[(String, Tensor<f32>)]) -> crate::Result<()> {
        for (name, t) in entries {
            let i = self.names.iter().position(|n| n == name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("unknown tensor `{}`", name))
            })?;
            if self.tensors[i].shape != t.shape {
                return Err(crate::Error::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    name, self.tensors[i].shape, t.shape
                )));
            }
            self.tensors[i] = t.map(|v| T::from_f32(v));
        }
        Ok(())
    }
}

/// Parameter tensors registered as graph leaves, addressable by name.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Binding {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound param `{}`", name))
    }
}

pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> (Binding, Vec<NodeId>) {
    let mut ids = HashMap::new();
    let mut order = Vec::with_capacity(params.names.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        let id = g.param(t.clone());
        ids.insert(name.clone(), id);
        order.push(id);
    }
    (Binding { ids }, order)
}

/// Dense layer over the last axis of a 2-D or 3-D input.
pub fn dense<T: Scalar>(g: &mut Graph<T>, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let w = bind.id(&format!("{prefix}.w"));
    let b = bind.id(&format!("{prefix}.b"));
    let xs = g.shape(x).to_vec();
    let din = *xs.last().unwrap();
    let dout = g.shape(w)[1];
    if xs.len() == 2 {
        let y = g.matmul(x, w);
        g.add_broadcast(y, b)
    } else {
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, din]);
        let y = g.matmul(flat, w);
        let y = g.add_broadcast(y, b);
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        g.reshape(y, &out_shape)
    }
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let gain = bind.id(&format!("{prefix}.g"));
    let bias = bind.id(&format!("{prefix}.b"));
    g.layer_norm(x, gain, bias)
}

/// conv3x3 + bias + layer norm over channels + relu, optional 2x2 max pool.
pub fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pool: bool,
) -> NodeId {
    let w = bind.id(&format!("{prefix}.w"));
    let b = bind.id(&format!("{prefix}.b"));
    let y = g.conv2d(x, w, stride);
    let y = g.add_broadcast(y, b);
    let y = layer_norm(g, bind, &format!("{prefix}.ln"), y);
    let y = g.relu(y);
    if pool {
        g.max_pool2d(y)
    } else {
        y
    }
}

/// Multi-head attention. `mask` is an additive rank-3 constant broadcastable
/// against the [N*heads, Lq, Lk] score tensor (first dim 1 or N*heads).
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let (n, lq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let lk = g.shape(kv_in)[1];
    assert_eq!(d % heads, 0, "model dim not divisible by heads");
    let dh = d / heads;

    let q = dense(g, bind, &format!("{prefix}.wq"), q_in);
    let k = dense(g, bind, &format!("{prefix}.wk"), kv_in);
    let v = dense(g, bind, &format!("{prefix}.wv"), kv_in);

    let split = |g: &mut Graph<T>, x: NodeId, l: usize| {
        let x = g.reshape(x, &[n, l, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[n * heads, l, dh])
    };
    let qh = split(g, q, lq);
    let kh = split(g, k, lk);
    let vh = split(g, v, lk);

    let kt = g.permute(kh, &[0, 2, 1]);
    let scores = g.batch_matmul(qh, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => g.add_broadcast(scores, m),
        None => scores,
    };
    let attn = g.softmax_last(scores);
    let ctx = g.batch_matmul(attn, vh);
    let ctx = g.reshape(ctx, &[n, heads, lq, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    let ctx = g.reshape(ctx, &[n, lq, d]);
    dense(g, bind, &format!("{prefix}.wo"), ctx)
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, bind: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let h = dense(g, bind, &format!("{prefix}.ff1"), x);
    let h = g.relu(h);
    dense(g, bind, &format!("{prefix}.ff2"), h)
}

/// Pre-norm transformer encoder layer.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let nx = layer_norm(g, bind, &format!("{prefix}.ln1"), x);
    let a = multi_head_attention(g, bind, &format!("{prefix}.attn"), nx, nx, heads, mask);
    let x = g.add(x, a);
    let nx = layer_norm(g, bind, &format!("{prefix}.ln2"), x);
    let f = feed_forward(g, bind, prefix, nx);
    g.add(x, f)
}

/// Pre-norm transformer decoder layer: causal self-attention over the
/// right-shifted targets, cross-attention against the encoder memory, then
/// the feed-forward block.
pub fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    memory: NodeId,
    heads: usize,
    causal: NodeId,
) -> NodeId {
    let nx = layer_norm(g, bind, &format!("{prefix}.ln1"), x);
    let a = multi_head_attention(g, bind, &format!("{prefix}.self"), nx, nx, heads, Some(causal));
    let x = g.add(x, a);
    let nx = layer_norm(g, bind, &format!("{prefix}.ln2"), x);
    let c = multi_head_attention(g, bind, &format!("{prefix}.cross"), nx, memory, heads, None);
    let x = g.add(x, c);
    let nx = layer_norm(g, bind, &format!("{prefix}.ln3"), x);
    let f = feed_forward(g, bind, prefix, nx);
    g.add(x, f)
}

/// Additive causal mask [1, l, l]: position t may not read positions > t.
pub fn causal_mask<T: Scalar>(l: usize) -> Tensor<T> {
    let neg = T::from_f64(-1e9);
    let mut data = vec![T::zero(); l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = neg;
        }
    }
    Tensor::from_vec(&[1, l, l], data)
}

/// Additive key-padding mask [n*heads, l, l]: keys at or past each sample's
/// length are hidden from every query.
pub fn padding_mask<T: Scalar>(lengths: &[usize], l: usize, heads: usize) -> Tensor<T> {
    let n = lengths.len();
    let neg = T::from_f64(-1e9);
    let mut data = vec![T::zero(); n * heads * l * l];
    for (i, &len) in lengths.iter().enumerate() {
        for hh in 0..heads {
            let base = (i * heads + hh) * l * l;
            for q in 0..l {
                for k in len..l {
                    data[base + q * l + k] = neg;
                }
            }
        }
    }
    Tensor::from_vec(&[n * heads, l, l], data)
}
