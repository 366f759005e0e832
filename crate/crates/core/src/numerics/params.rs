use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scalar::Scalar;
use crate::ir::{Graph, NodeId, PrimOp, UpsampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub role: ParamRole,
    pub dims: Vec<usize>,
    pub values: Vec<T>,
    pub learnable: bool,
}

/// Address of one learnable scalar in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef {
    pub node: NodeId,
    pub slot: usize,
    pub index: usize,
}

/// The parameter layout an op requires: role, dims, learnable.
pub fn param_layout(op: &PrimOp) -> Vec<(ParamRole, Vec<usize>, bool)> {
    use ParamRole::*;
    match op {
        PrimOp::Conv(c) => {
            let mut v = vec![(
                Weight,
                vec![c.out_channels, c.in_per_group(), c.kernel, c.kernel],
                true,
            )];
            if c.has_bias {
                v.push((Bias, vec![c.out_channels], true));
            }
            v
        }
        PrimOp::BatchNorm { channels, .. } => vec![
            (Scale, vec![*channels], true),
            (Shift, vec![*channels], true),
            (RunningMean, vec![*channels], false),
            (RunningVar, vec![*channels], false),
        ],
        PrimOp::Linear {
            in_features,
            out_features,
            has_bias,
        } => {
            let mut v = vec![(Weight, vec![*out_features, *in_features], true)];
            if *has_bias {
                v.push((Bias, vec![*out_features], true));
            }
            v
        }
        PrimOp::Upsample(u) => {
            let learnable = u.mode == UpsampleMode::LearnedTransposedConv;
            vec![(
                Weight,
                vec![u.channels, 1, u.kernel(), u.kernel()],
                learnable,
            )]
        }
        _ => Vec::new(),
    }
}

/// One-dimensional bilinear interpolation kernel for an integer factor.
pub fn bilinear_kernel(factor: usize) -> Vec<f64> {
    let k = 2 * factor - factor % 2;
    let f = factor as f64;
    let center = (2 * k.div_ceil(2) - 1 - k % 2) as f64 / (2.0 * f);
    (0..k)
        .map(|i| 1.0 - (i as f64 / f - center).abs())
        .collect()
}

/// Parameters of every node that owns any, keyed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<NodeId, Vec<Param<T>>>,
    version: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            version: 0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn get(&self, node: NodeId) -> Option<&[Param<T>]> {
        self.params.get(&node).map(Vec::as_slice)
    }

    pub fn param(&self, node: NodeId, role: ParamRole) -> Option<&Param<T>> {
        self.params.get(&node)?.iter().find(|p| p.role == role)
    }

    pub fn values(&self, node: NodeId, role: ParamRole) -> Option<&[T]> {
        self.param(node, role).map(|p| p.values.as_slice())
    }

    /// Mutable access. Any tape recorded before this call becomes stale.
    pub fn values_mut(&mut self, node: NodeId, role: ParamRole) -> Option<&mut [T]> {
        self.version += 1;
        self.params
            .get_mut(&node)?
            .iter_mut()
            .find(|p| p.role == role)
            .map(|p| p.values.as_mut_slice())
    }

    pub fn insert(&mut self, node: NodeId, params: Vec<Param<T>>) {
        self.version += 1;
        self.params.insert(node, params);
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[Param<T>])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Every learnable scalar, in node, slot, element order.
    pub fn learnable_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (&node, ps) in &self.params {
            for (slot, p) in ps.iter().enumerate().filter(|(_, p)| p.learnable) {
                out.extend((0..p.values.len()).map(|index| ParamRef { node, slot, index }));
            }
        }
        out
    }

    pub fn learnable_len(&self) -> usize {
        self.params
            .values()
            .flatten()
            .filter(|p| p.learnable)
            .map(|p| p.values.len())
            .sum()
    }

    pub fn slot(&self, r: ParamRef) -> &Param<T> {
        &self.params[&r.node][r.slot]
    }

    pub fn value(&self, r: ParamRef) -> T {
        self.params[&r.node][r.slot].values[r.index]
    }

    pub fn set(&mut self, r: ParamRef, v: T) {
        self.version += 1;
        self.params.get_mut(&r.node).expect("ref into this store")[r.slot].values[r.index] = v;
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(&k, ps)| {
                let zeroed = ps
                    .iter()
                    .map(|p| Param {
                        values: vec![T::zero(); p.values.len()],
                        ..p.clone()
                    })
                    .collect();
                (k, zeroed)
            })
            .collect();
        ParamStore { params, version: 0 }
    }

    /// `self -= lr * grads` over learnable slots.
    pub fn descend(&mut self, grads: &ParamStore<T>, lr: T) {
        self.version += 1;
        for (node, ps) in self.params.iter_mut() {
            let Some(gs) = grads.params.get(node) else {
                continue;
            };
            for (p, g) in ps.iter_mut().zip(gs).filter(|(p, _)| p.learnable) {
                for (v, &d) in p.values.iter_mut().zip(&g.values) {
                    *v -= lr * d;
                }
            }
        }
    }

    /// Whether the store holds exactly the layout every node of `graph` needs.
    pub fn layout_problem(&self, graph: &Graph) -> Option<NodeId> {
        for n in graph.nodes() {
            let layout = param_layout(&n.op);
            let have = self.params.get(&n.id).map(Vec::as_slice).unwrap_or(&[]);
            let matches = layout.len() == have.len()
                && layout.iter().zip(have).all(|((role, dims, _), p)| {
                    *role == p.role
                        && *dims == p.dims
                        && p.values.len() == dims.iter().product::<usize>()
                });
            if !matches {
                return Some(n.id);
            }
        }
        None
    }
}

/// Deterministic initialization: He-uniform convolution and linear weights
/// with bound `sqrt(6 / fan_in)`, zero biases, unit BN scale, bilinear
/// upsampling kernels.
pub fn init_params<T: Scalar>(graph: &Graph, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for n in graph.nodes() {
        let layout = param_layout(&n.op);
        if layout.is_empty() {
            continue;
        }
        let params = layout
            .into_iter()
            .map(|(role, dims, learnable)| {
                let len: usize = dims.iter().product();
                let values = match (role, &n.op) {
                    (ParamRole::Weight, PrimOp::Upsample(u)) => {
                        let k1 = bilinear_kernel(u.factor);
                        let plane: Vec<T> = k1
                            .iter()
                            .flat_map(|a| k1.iter().map(move |b| T::from_f64_lossy(a * b)))
                            .collect();
                        plane.iter().copied().cycle().take(len).collect()
                    }
                    (ParamRole::Weight, _) => {
                        let fan_in: usize = dims[1..].iter().product();
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..len)
                            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                            .collect()
                    }
                    (ParamRole::Scale | ParamRole::RunningVar, _) => vec![T::one(); len],
                    _ => vec![T::zero(); len],
                };
                Param {
                    role,
                    dims,
                    values,
                    learnable,
                }
            })
            .collect();
        store.params.insert(n.id, params);
    }
    store
}
