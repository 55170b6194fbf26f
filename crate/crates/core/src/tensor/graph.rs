//! Tape-based reverse-mode differentiation. Each op appends a node holding
//! its forward value and a closure producing parent gradients; `backward`
//! walks the tape in reverse insertion order.
//!
//! Shape agreement between composed ops is an internal invariant, enforced
//! with assertions; fallible validation happens at the public model
//! boundaries.

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn<T>>,
    ) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        debug_assert!(value.is_finite(), "non-finite op output");
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf with gradient (a trainable parameter).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node; returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(
            self.nodes[loss.0].value.shape.as_slice(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let parent_grads = backward(&grad_out, &parent_vals, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape, self.nodes[p.0].value.shape);
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            grads[i] = Some(grad_out);
        }
        Gradients { grads }
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = Tensor::from_vec(
            self.shape(a),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _, _| {
                vec![Some(g.clone()), Some(g.clone())]
            })),
        )
    }

    /// `a + b` where every dim of `b` is either 1 or equal to `a`'s
    /// (same rank). Gradient of `b` sums over broadcast axes.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        assert_eq!(ashape.len(), bshape.len(), "broadcast rank mismatch");
        for (x, y) in ashape.iter().zip(&bshape) {
            assert!(*y == 1 || *y == *x, "broadcast dim mismatch");
        }
        let map = broadcast_index_map(&ashape, &bshape);
        let bv = &self.value(b).data;
        let value = Tensor::from_vec(
            &ashape,
            self.value(a)
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv[map[i]])
                .collect(),
        );
        let bshape2 = bshape.clone();
        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, _, _, _| {
                let mut gb = Tensor::zeros(&bshape2);
                for (i, &gv) in g.data.iter().enumerate() {
                    gb.data[map[i]] += gv;
                }
                vec![Some(g.clone()), Some(gb)]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = Tensor::from_vec(
            self.shape(a),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, pv, _, needs| {
                let ga = needs[0].then(|| {
                    Tensor::from_vec(
                        &g.shape,
                        g.data.iter().zip(&pv[1].data).map(|(&gv, &y)| gv * y).collect(),
                    )
                });
                let gb = needs[1].then(|| {
                    Tensor::from_vec(
                        &g.shape,
                        g.data.iter().zip(&pv[0].data).map(|(&gv, &x)| gv * x).collect(),
                    )
                });
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x * cv);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _, _| vec![Some(g.map(|x| x * cv))])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, pv, _, _| {
                vec![Some(Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(&pv[0].data)
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                ))]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.exp());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, out, _| {
                vec![Some(Tensor::from_vec(
                    &g.shape,
                    g.data.iter().zip(&out.data).map(|(&gv, &y)| gv * y).collect(),
                ))]
            })),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.ln());
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, pv, _, _| {
                vec![Some(Tensor::from_vec(
                    &g.shape,
                    g.data.iter().zip(&pv[0].data).map(|(&gv, &x)| gv / x).collect(),
                ))]
            })),
        )
    }

    // -- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape size mismatch"
        );
        let value = Tensor::from_vec(shape, self.value(a).data.clone());
        let old_shape = self.shape(a).to_vec();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(Tensor::from_vec(&old_shape, g.data.clone()))]
            })),
        )
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let value = permute_tensor(self.value(a), axes);
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            vec![a],
            Some(Box::new(move |g, _, _, _| {
                vec![Some(permute_tensor(g, &inverse))]
            })),
        )
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading dims");
        let da = sa[sa.len() - 1];
        let db = sb[sb.len() - 1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.value(b).data[r * db..(r + 1) * db]);
        }
        let (sa2, sb2) = (sa.clone(), sb.clone());
        self.push(
            Tensor::from_vec(&shape, data),
            vec![a, b],
            Some(Box::new(move |g, _, _, _| {
                let mut ga = Tensor::zeros(&sa2);
                let mut gb = Tensor::zeros(&sb2);
                for r in 0..rows {
                    ga.data[r * da..(r + 1) * da]
                        .copy_from_slice(&g.data[r * (da + db)..r * (da + db) + da]);
                    gb.data[r * db..(r + 1) * db]
                        .copy_from_slice(&g.data[r * (da + db) + da..(r + 1) * (da + db)]);
                }
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Concatenate two 2-D tensors along axis 0.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sa[1], sb[1], "concat_rows column mismatch");
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let shape = vec![sa[0] + sb[0], sa[1]];
        let na = sa[0] * sa[1];
        let (sa2, sb2) = (sa.clone(), sb.clone());
        self.push(
            Tensor::from_vec(&shape, data),
            vec![a, b],
            Some(Box::new(move |g, _, _, _| {
                vec![
                    Some(Tensor::from_vec(&sa2, g.data[..na].to_vec())),
                    Some(Tensor::from_vec(&sb2, g.data[na..].to_vec())),
                ]
            })),
        )
    }

    // -- linear algebra ----------------------------------------------------

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let value = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        self.push(
            Tensor::from_vec(&[m, n], value),
            vec![a, b],
            Some(Box::new(move |g, pv, _, needs| {
                // ga = g b^T ; gb = a^T g
                let ga = needs[0].then(|| {
                    let bt = transpose_raw(&pv[1].data, k, n);
                    Tensor::from_vec(&[m, k], matmul_raw(&g.data, &bt, m, n, k))
                });
                let gb = needs[1].then(|| {
                    let at = transpose_raw(&pv[0].data, m, k);
                    Tensor::from_vec(&[k, n], matmul_raw(&at, &g.data, k, m, n))
                });
                vec![ga, gb]
            })),
        )
    }

    /// [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sa[0], sb[0], "batch dim mismatch");
        assert_eq!(sa[2], sb[1], "batch matmul inner dim mismatch");
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            data.extend(matmul_raw(
                &self.value(a).data[i * m * k..(i + 1) * m * k],
                &self.value(b).data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.push(
            Tensor::from_vec(&[bsz, m, n], data),
            vec![a, b],
            Some(Box::new(move |g, pv, _, needs| {
                let ga = needs[0].then(|| {
                    let mut out = Tensor::zeros(&[bsz, m, k]);
                    for i in 0..bsz {
                        let bt = transpose_raw(&pv[1].data[i * k * n..(i + 1) * k * n], k, n);
                        out.data[i * m * k..(i + 1) * m * k].copy_from_slice(&matmul_raw(
                            &g.data[i * m * n..(i + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                        ));
                    }
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = Tensor::zeros(&[bsz, k, n]);
                    for i in 0..bsz {
                        let at = transpose_raw(&pv[0].data[i * m * k..(i + 1) * m * k], m, k);
                        out.data[i * k * n..(i + 1) * k * n].copy_from_slice(&matmul_raw(
                            &at,
                            &g.data[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                        ));
                    }
                    out
                });
                vec![ga, gb]
            })),
        )
    }

    // -- reductions and normalizations --------------------------------------

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        self.push(
            Tensor::from_vec(&shape, data),
            vec![a],
            Some(Box::new(move |g, _, out, _| {
                let mut gx = Tensor::zeros(&g.shape);
                for ((grow, yrow), xrow) in g
                    .data
                    .chunks(cols)
                    .zip(out.data.chunks(cols))
                    .zip(gx.data.chunks_mut(cols))
                {
                    let dotp: T = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for ((x, &gv), &y) in xrow.iter_mut().zip(grow).zip(yrow) {
                        *x = y * (gv - dotp);
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// log(sum(exp(x))) over the last axis; result drops that axis
    /// (a 1-D input yields shape [1]).
    pub fn logsumexp_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let data: Vec<T> = self
            .value(a)
            .data
            .chunks(cols)
            .map(|row| {
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let s: T = row.iter().map(|&x| (x - m).exp()).sum();
                m + s.ln()
            })
            .collect();
        self.push(
            Tensor::from_vec(&out_shape, data),
            vec![a],
            Some(Box::new(move |g, pv, _, _| {
                let mut gx = Tensor::zeros(&pv[0].shape);
                for ((xrow, gxrow), &gv) in pv[0]
                    .data
                    .chunks(cols)
                    .zip(gx.data.chunks_mut(cols))
                    .zip(&g.data)
                {
                    let mut sm: Vec<T> = xrow.to_vec();
                    softmax_row(&mut sm);
                    for (o, s) in gxrow.iter_mut().zip(sm) {
                        *o = gv * s;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let data: Vec<T> = self
            .value(a)
            .data
            .chunks(cols)
            .map(|row| row.iter().cloned().sum())
            .collect();
        self.push(
            Tensor::from_vec(&out_shape, data),
            vec![a],
            Some(Box::new(move |g, pv, _, _| {
                let mut gx = Tensor::zeros(&pv[0].shape);
                for (gxrow, &gv) in gx.data.chunks_mut(cols).zip(&g.data) {
                    for o in gxrow {
                        *o = gv;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: T = self.value(a).data.iter().cloned().sum();
        self.push(
            Tensor::scalar(total),
            vec![a],
            Some(Box::new(|g, pv, _, _| {
                let gv = g.data[0];
                vec![Some(pv[0].map(|_| gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        assert_eq!(self.shape(gain), &[cols]);
        assert_eq!(self.shape(bias), &[cols]);
        let eps = T::from_f64(1e-5);
        let gv = self.value(gain).data.clone();
        let bv = self.value(bias).data.clone();
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data.chunks(cols) {
            let (mu, std) = row_stats(row, eps);
            for (i, &v) in row.iter().enumerate() {
                data.push(((v - mu) / std) * gv[i] + bv[i]);
            }
        }
        self.push(
            Tensor::from_vec(&shape, data),
            vec![x, gain, bias],
            Some(Box::new(move |g, pv, _, needs| {
                let ncols = T::from_f64(cols as f64);
                let mut gx = Tensor::zeros(&pv[0].shape);
                let mut ggain = Tensor::zeros(&[cols]);
                let mut gbias = Tensor::zeros(&[cols]);
                for ((xrow, grow), gxrow) in pv[0]
                    .data
                    .chunks(cols)
                    .zip(g.data.chunks(cols))
                    .zip(gx.data.chunks_mut(cols))
                {
                    let (mu, std) = row_stats(xrow, eps);
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mu) / std).collect();
                    let dxhat: Vec<T> = grow
                        .iter()
                        .zip(&pv[1].data)
                        .map(|(&gv_, &ga)| gv_ * ga)
                        .collect();
                    let mean_dxhat: T = dxhat.iter().cloned().sum::<T>() / ncols;
                    let mean_dxhat_xhat: T =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<T>() / ncols;
                    for i in 0..cols {
                        gxrow[i] = (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) / std;
                        ggain.data[i] += grow[i] * xhat[i];
                        gbias.data[i] += grow[i];
                    }
                }
                vec![
                    needs[0].then_some(gx),
                    needs[1].then_some(ggain),
                    needs[2].then_some(gbias),
                ]
            })),
        )
    }

    /// Unit-normalize each vector along the last axis.
    pub fn l2_normalize_last(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let eps = T::from_f64(1e-12);
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data.chunks(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt() + eps;
            data.extend(row.iter().map(|&v| v / norm));
        }
        self.push(
            Tensor::from_vec(&shape, data),
            vec![x],
            Some(Box::new(move |g, pv, out, _| {
                let mut gx = Tensor::zeros(&pv[0].shape);
                for ((xrow, yrow), (grow, gxrow)) in pv[0]
                    .data
                    .chunks(cols)
                    .zip(out.data.chunks(cols))
                    .zip(g.data.chunks(cols).zip(gx.data.chunks_mut(cols)))
                {
                    let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt() + eps;
                    let gy: T = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for i in 0..cols {
                        gxrow[i] = (grow[i] - yrow[i] * gy) / norm;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    // -- structured ops ------------------------------------------------------

    /// 3x3 convolution, padding 1, stride 1 or 2, NHWC.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
        assert_eq!(&ws[..3], &[3, 3, xs[3]], "conv2d kernel must be 3x3xCin");
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[3];
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (wd + 2 - 3) / stride + 1;
        let out = conv2d_forward(
            &self.value(x).data,
            &self.value(w).data,
            n,
            h,
            wd,
            ci,
            co,
            stride,
        );
        self.push(
            Tensor::from_vec(&[n, ho, wo, co], out),
            vec![x, w],
            Some(Box::new(move |g, pv, _, needs| {
                let (gx, gw) = conv2d_backward(
                    &g.data,
                    &pv[0].data,
                    &pv[1].data,
                    n,
                    h,
                    wd,
                    ci,
                    co,
                    stride,
                    needs[0],
                    needs[1],
                );
                vec![
                    gx.map(|d| Tensor::from_vec(&[n, h, wd, ci], d)),
                    gw.map(|d| Tensor::from_vec(&[3, 3, ci, co], d)),
                ]
            })),
        )
    }

    /// 2x2 max pooling with stride 2, NHWC; ties resolve to the first
    /// element in scan order.
    pub fn max_pool2d(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2d needs even H,W");
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); n * ho * wo * c];
        let mut arg = vec![0u32; n * ho * wo * c];
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((ni * h + oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = ((ni * ho + oy) * wo + ox) * c + ch;
                        out[oidx] = best;
                        arg[oidx] = best_idx as u32;
                    }
                }
            }
        }
        let in_len = n * h * w * c;
        self.push(
            Tensor::from_vec(&[n, ho, wo, c], out),
            vec![x],
            Some(Box::new(move |g, pv, _, _| {
                let mut gx = Tensor::from_vec(&pv[0].shape, vec![T::zero(); in_len]);
                for (o, &gv) in g.data.iter().enumerate() {
                    gx.data[arg[o] as usize] += gv;
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Mean over the spatial axes: [N,H,W,C] -> [N,C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); n * c];
        for ni in 0..n {
            for p in 0..h * w {
                for ch in 0..c {
                    out[ni * c + ch] += xv[(ni * h * w + p) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.push(
            Tensor::from_vec(&[n, c], out),
            vec![x],
            Some(Box::new(move |g, pv, _, _| {
                let mut gx = Tensor::zeros(&pv[0].shape);
                for ni in 0..n {
                    for p in 0..h * w {
                        for ch in 0..c {
                            gx.data[(ni * h * w + p) * c + ch] = g.data[ni * c + ch] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Rows of `table` gathered by token id; output shape = ids shape + [D].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> NodeId {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2);
        let (v, d) = (ts[0], ts[1]);
        assert_eq!(ids.len(), ids_shape.iter().product::<usize>());
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {} out of vocab {}", id, v);
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let ids_owned = ids.to_vec();
        self.push(
            Tensor::from_vec(&out_shape, data),
            vec![table],
            Some(Box::new(move |g, pv, _, _| {
                let mut gt = Tensor::zeros(&pv[0].shape);
                for (row, &id) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        gt.data[id * d + j] += g.data[row * d + j];
                    }
                }
                vec![Some(gt)]
            })),
        )
    }

    /// Pick one position per batch element: [N,L,D] with pos[i] < L -> [N,D].
    pub fn select_positions(&mut self, x: NodeId, pos: &[usize]) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (n, l, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(pos.len(), n);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * d);
        for (i, &p) in pos.iter().enumerate() {
            assert!(p < l, "position out of range");
            data.extend_from_slice(&xv[(i * l + p) * d..(i * l + p) * d + d]);
        }
        let pos_owned = pos.to_vec();
        self.push(
            Tensor::from_vec(&[n, d], data),
            vec![x],
            Some(Box::new(move |g, pv, _, _| {
                let mut gx = Tensor::zeros(&pv[0].shape);
                for (i, &p) in pos_owned.iter().enumerate() {
                    gx.data[(i * l + p) * d..(i * l + p) * d + d]
                        .copy_from_slice(&g.data[i * d..(i + 1) * d]);
                }
                vec![Some(gx)]
            })),
        )
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mu = row.iter().cloned().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, (var + eps).sqrt())
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    assert_eq!(axes.len(), t.shape.len());
    let in_shape = &t.shape;
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let rank = axes.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_strides_src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); t.data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * out_strides_src[i];
        }
        *o = t.data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn broadcast_index_map(ashape: &[usize], bshape: &[usize]) -> Vec<usize> {
    let rank = ashape.len();
    let mut bstrides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        bstrides[i] = bstrides[i + 1] * bshape[i + 1];
    }
    let total: usize = ashape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut bi = 0usize;
        for i in 0..rank {
            let ix = if bshape[i] == 1 { 0 } else { idx[i] };
            bi += ix * bstrides[i];
        }
        map.push(bi);
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < ashape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    map
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    n: usize,
    h: usize,
    wd: usize,
    ci: usize,
    co: usize,
    stride: usize,
) -> Vec<T> {
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (wd + 2 - 3) / stride + 1;
    let mut out = vec![T::zero(); n * ho * wo * co];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[((ni * ho + oy) * wo + ox) * co..][..co];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xrow = &x[((ni * h + iy as usize) * wd + ix as usize) * ci..][..ci];
                        let wbase = ((ky * 3 + kx) * ci) * co;
                        for (cii, &xv) in xrow.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &w[wbase + cii * co..][..co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    h: usize,
    wd: usize,
    ci: usize,
    co: usize,
    stride: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (wd + 2 - 3) / stride + 1;
    let mut gx = if need_gx {
        Some(vec![T::zero(); n * h * wd * ci])
    } else {
        None
    };
    let mut gw = if need_gw {
        Some(vec![T::zero(); 9 * ci * co])
    } else {
        None
    };
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let grow = &g[((ni * ho + oy) * wo + ox) * co..][..co];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((ni * h + iy as usize) * wd + ix as usize) * ci;
                        let wbase = ((ky * 3 + kx) * ci) * co;
                        if let Some(gw) = gw.as_mut() {
                            for cii in 0..ci {
                                let xv = x[xoff + cii];
                                if xv == T::zero() {
                                    continue;
                                }
                                let gwrow = &mut gw[wbase + cii * co..][..co];
                                for (o, &gv) in gwrow.iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            for cii in 0..ci {
                                let wrow = &w[wbase + cii * co..][..co];
                                let mut acc = T::zero();
                                for (wv, &gv) in wrow.iter().zip(grow) {
                                    acc += *wv * gv;
                                }
                                gx[xoff + cii] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
