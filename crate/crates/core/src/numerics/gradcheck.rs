use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::exec::{backward, forward, forward_partial, same_branches, ExecError, Mode};
use super::params::{ParamRole, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::ir::{Graph, NodeId};

/// Batch size for toy-scale checks. Batch statistics over fewer values make
/// the loss too curved for a finite difference at `epsilon = 1e-5`.
pub const DEFAULT_GRADCHECK_BATCH: usize = 16;

/// Source of the normalization statistics while differentiating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BnStatistics {
    /// Per-batch statistics, differentiated through (Train mode).
    Batch,
    /// Statistics of the unperturbed batch, held constant (Eval mode with
    /// running statistics set to them). The base forward is identical.
    Frozen,
}

/// Central-difference formula with step `epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+e) - f(x-e)) / 2e`, error O(e^2).
    ThreePoint,
    /// `(8(f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e`, error O(e^4).
    FivePoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
    pub stencil: Stencil,
    pub statistics: BnStatistics,
    /// Evaluate the perturbed forwards on the ReLU and max-pool branches
    /// of the base forward, so a perturbation cannot cross a kink.
    pub freeze_branches: bool,
    /// Flip the sign of the largest sampled analytic gradient before
    /// comparing. Exists to show the check catches a broken backward pass.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples: 200,
            seed: 0,
            stencil: Stencil::FivePoint,
            statistics: BnStatistics::Batch,
            freeze_branches: true,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub node: NodeId,
    pub role: ParamRole,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub checked: Vec<ParamCheck>,
    pub total_learnable: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `L(plus) - L(minus)`, differenced elementwise before contracting.
fn contract_difference<T: Scalar>(
    plus: &[Tensor<T>],
    minus: &[Tensor<T>],
    seeds: &[Tensor<T>],
) -> f64 {
    let mut acc = 0.0;
    for ((p, m), g) in plus.iter().zip(minus).zip(seeds) {
        for ((&a, &b), &w) in p.data().iter().zip(m.data()).zip(g.data()) {
            acc += ((a - b) * w).to_f64_lossy();
        }
    }
    acc
}

/// Copies the batch statistics of a Train-mode tape into the running
/// statistics, so an Eval forward reproduces the Train forward exactly.
fn calibrate<T: Scalar>(params: &mut ParamStore<T>, tape: &super::exec::Tape<T>, graph: &Graph) {
    for id in (0..graph.len()).map(NodeId) {
        if let Some((mean, var)) = tape.batch_stats(id) {
            let (mean, var) = (mean.to_vec(), var.to_vec());
            if let Some(rm) = params.values_mut(id, ParamRole::RunningMean) {
                rm.copy_from_slice(&mean);
            }
            if let Some(rv) = params.values_mut(id, ParamRole::RunningVar) {
                rv.copy_from_slice(&var);
            }
        }
    }
}

/// Compares analytic gradients of `L = sum_k <out_k, G_k>` (fixed random
/// `G`) with central differences on a uniform sample of learnable scalars.
pub fn grad_check<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    config: &GradCheckConfig,
) -> Result<GradReport, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inputs = std::slice::from_ref(input);
    let mut work = params.clone();
    let mode = match config.statistics {
        BnStatistics::Batch => Mode::Train,
        BnStatistics::Frozen => {
            let train = forward(graph, params, inputs, Mode::Train)?;
            calibrate(&mut work, &train.tape, graph);
            Mode::Eval
        }
    };
    let base = forward(graph, &work, inputs, mode)?;
    let seeds: Vec<Tensor<T>> = base
        .outputs
        .iter()
        .map(|o| Tensor::random_uniform(o.shape(), -1.0, 1.0, &mut rng))
        .collect();
    let grads = backward(graph, &work, &base.tape, &seeds)?;

    let refs = work.learnable_refs();
    let mut picked = sample(&mut rng, refs.len(), config.samples.min(refs.len())).into_vec();
    picked.sort_unstable();

    let eps = T::from_f64_lossy(config.epsilon);
    let branches = config.freeze_branches.then_some(&base.tape);
    let run = |p: &ParamStore<T>, dirty: &[bool]| {
        forward_partial(graph, p, inputs, mode, branches, &base.tape, dirty)
    };
    let mut checked = Vec::with_capacity(picked.len());
    for &k in &picked {
        let r = refs[k];
        let dirty = base.tape.downstream_of(graph, r.node);
        let orig = work.value(r);
        let mut kink = false;
        let mut diff = |k: f64| -> Result<f64, ExecError> {
            let step = T::from_f64_lossy(k) * eps;
            work.set(r, orig + step);
            let fp = run(&work, &dirty)?;
            work.set(r, orig - step);
            let fm = run(&work, &dirty)?;
            work.set(r, orig);
            kink |= !(same_branches(graph, &base.tape, &fp.tape)
                && same_branches(graph, &base.tape, &fm.tape));
            Ok(contract_difference(&fp.outputs, &fm.outputs, &seeds))
        };
        let numeric = match config.stencil {
            Stencil::ThreePoint => diff(1.0)? / (2.0 * config.epsilon),
            Stencil::FivePoint => (8.0 * diff(1.0)? - diff(2.0)?) / (12.0 * config.epsilon),
        };
        let analytic = grads.params.value(r).to_f64_lossy();
        checked.push(ParamCheck {
            node: r.node,
            role: work.slot(r).role,
            index: r.index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            kink,
        });
    }

    if config.corrupt_backward {
        let worst = checked
            .iter_mut()
            .max_by(|a, b| a.analytic.abs().total_cmp(&b.analytic.abs()));
        if let Some(c) = worst {
            c.analytic = -c.analytic;
            c.rel_error = relative_error(c.analytic, c.numeric);
        }
    }

    let max_rel_error = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        passed: !checked.is_empty() && max_rel_error < config.tolerance,
        checked,
        total_learnable: refs.len(),
        max_rel_error,
        tolerance: config.tolerance,
    })
}
