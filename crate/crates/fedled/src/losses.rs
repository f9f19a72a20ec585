//! Training objective: supervised cross-entropy on source labels, a
//! conditional adversarial term that aligns the two latent distributions,
//! and a multi-layer kernel mean discrepancy penalty.
//!
//! The discriminator maximizes its log-likelihood of telling source from
//! target; extractors and classifier minimize it. Both directions come out
//! of a single backward pass because the discriminator's inputs sit behind
//! gradient-reversal nodes: the tape total is
//!
//! ```text
//! total = l_cls - lambda * l_cdan + beta * l_align
//! ```
//!
//! whose gradient ascends `l_cdan` for discriminator parameters while the
//! reversal flips the sign seen by everything upstream of it, so feature
//! parameters descend `l_cls + lambda * l_cdan + beta * l_align`. The
//! entropy-derived sample weights are routed through the same reversal,
//! which keeps those two group objectives exactly differentiable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::models::{mlp_forward, MlpParams, MlpVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Above this product of feature width and class count the joint map
/// switches from the explicit outer product to a randomized projection.
pub const RANDOM_MAP_THRESHOLD: usize = 4096;

/// Width of the randomized joint projection.
pub const RANDOM_MAP_DIM: usize = 4096;

/// Frozen random projection pair for the joint feature-prediction map:
/// `h = (f R_f) ⊙ (g R_g) / sqrt(dim)`.
#[derive(Clone, Debug)]
pub struct RandomMap {
    pub rf: Tensor,
    pub rg: Tensor,
}

impl RandomMap {
    pub fn needed(feature_dim: usize, num_classes: usize) -> bool {
        feature_dim * num_classes > RANDOM_MAP_THRESHOLD
    }

    /// Standard-normal projections, frozen at setup and reused every round.
    pub fn new(feature_dim: usize, num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        RandomMap {
            rf: Tensor::new([feature_dim, dim], draw(feature_dim * dim)),
            rg: Tensor::new([num_classes, dim], draw(num_classes * dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.rf.shape()[1]
    }
}

/// Per-sample certainty weight `1 + exp(-H(p))`, one entry per row of `p`.
/// One-hot rows give exactly 2, uniform rows `1 + 1/C`.
pub fn entropy_weight(tape: &mut Tape, p: Var) -> Var {
    let pv = tape.value(p);
    assert_eq!(pv.rank(), 2, "dimension error: entropy_weight needs a matrix");
    let c = pv.shape()[1];
    for i in 0..pv.shape()[0] {
        let s: f64 = pv.row(i).iter().sum();
        assert!(
            (s - 1.0).abs() < 1e-9,
            "contract error: probability row {i} sums to {s}"
        );
    }
    debug_assert!(c >= 2);
    let h = tape.entropy_rows(p);
    let neg_h = tape.scale(h, -1.0);
    let e = tape.exp(neg_h);
    tape.add_const(e, 1.0)
}

/// `w / mean(w)`, so weights average to one within each domain.
fn normalize_by_mean(tape: &mut Tape, w: Var) -> Var {
    let m = tape.mean(w);
    let inv = tape.recip(m);
    tape.mul(w, inv)
}

fn joint_map(tape: &mut Tape, f: Var, g: Var, rml: Option<(Var, Var)>) -> Var {
    match rml {
        None => tape.outer_flatten(f, g),
        Some((rf, rg)) => {
            let fp = tape.matmul(f, rf);
            let gp = tape.matmul(g, rg);
            let prod = tape.mul(fp, gp);
            let dim = tape.value(rf).shape()[1];
            tape.scale(prod, 1.0 / (dim as f64).sqrt())
        }
    }
}

/// Conditional adversarial loss: the discriminator's mean weighted
/// log-likelihood of labeling source latents 1 and target latents 0.
///
/// Both the joint map and the entropy-weight path enter through
/// gradient-reversal nodes with weight `grl_lambda`, so one backward pass
/// trains the discriminator up while pushing everything upstream the
/// other way.
#[allow(clippy::too_many_arguments)]
pub fn cdan_loss(
    tape: &mut Tape,
    f_s: Var,
    p_s: Var,
    f_t: Var,
    p_t: Var,
    d_vars: &MlpVars,
    d_params: &MlpParams,
    rml: Option<&RandomMap>,
    grl_lambda: f64,
) -> Var {
    let rml_vars = rml.map(|m| (tape.leaf(m.rf.clone()), tape.leaf(m.rg.clone())));
    let (n_s, n_t) = (tape.value(f_s).shape()[0], tape.value(f_t).shape()[0]);

    let h_s = joint_map(tape, f_s, p_s, rml_vars);
    let h_t = joint_map(tape, f_t, p_t, rml_vars);
    let h_s = tape.grad_reverse(h_s, grl_lambda);
    let h_t = tape.grad_reverse(h_t, grl_lambda);

    let z_s = *mlp_forward(tape, d_vars, d_params, h_s)
        .last()
        .expect("contract error: empty discriminator");
    let z_t = *mlp_forward(tape, d_vars, d_params, h_t)
        .last()
        .expect("contract error: empty discriminator");
    let z_s = tape.reshape(z_s, [n_s]);
    let z_t = tape.reshape(z_t, [n_t]);

    let p_s_rev = tape.grad_reverse(p_s, grl_lambda);
    let p_t_rev = tape.grad_reverse(p_t, grl_lambda);
    let w_s = entropy_weight(tape, p_s_rev);
    let w_t = entropy_weight(tape, p_t_rev);
    let w_s = normalize_by_mean(tape, w_s);
    let w_t = normalize_by_mean(tape, w_t);

    let ls_s = tape.log_sigmoid(z_s);
    let neg_zt = tape.scale(z_t, -1.0);
    let ls_t = tape.log_sigmoid(neg_zt);
    let ws_ls = tape.mul(w_s, ls_s);
    let wt_ls = tape.mul(w_t, ls_t);
    let term_s = tape.mean(ws_ls);
    let term_t = tape.mean(wt_ls);
    tape.add(term_s, term_t)
}

/// How the kernel bandwidth is chosen.
///
/// `Median` freezes the median pairwise squared distance of the joint
/// batch, recomputed per call outside the differentiated graph. `Fixed`
/// pins a constant, which keeps the loss an exact function of its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Bandwidth multipliers; one Gaussian kernel per entry, summed.
    pub multipliers: Vec<f64>,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            bandwidth: Bandwidth::Median,
        }
    }
}

/// `d2[i, j] = |x_i - y_j|^2` via the Gram expansion, entirely on the tape.
fn pairwise_sqdist(tape: &mut Tape, x: Var, y: Var) -> Var {
    let yt = tape.transpose(y);
    let xy = tape.matmul(x, yt);
    let xx = tape.mul(x, x);
    let rx = tape.row_sum(xx);
    let yy = tape.mul(y, y);
    let ry = tape.row_sum(yy);
    let m2 = tape.scale(xy, -2.0);
    // add |y_j|^2 across rows, then |x_i|^2 across columns via transposes
    let a = tape.add(m2, ry);
    let at = tape.transpose(a);
    let b = tape.add(at, rx);
    tape.transpose(b)
}

/// Sum of Gaussian kernels over the multiplier ladder.
fn multi_kernel(tape: &mut Tape, d2: Var, base: f64, multipliers: &[f64]) -> Var {
    assert!(
        base.is_finite() && base > 0.0,
        "contract error: kernel bandwidth must be positive, got {base}"
    );
    let mut acc: Option<Var> = None;
    for &m in multipliers {
        let s = tape.scale(d2, -1.0 / (m * base));
        let e = tape.exp(s);
        acc = Some(match acc {
            None => e,
            Some(prev) => tape.add(prev, e),
        });
    }
    acc.expect("contract error: empty multiplier ladder")
}

/// Median pairwise squared distance over the stacked rows of both
/// tensors, off-diagonal pairs only. Falls back to 1 when degenerate.
pub(crate) fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.shape()[1];
    let rows: Vec<&[f64]> = (0..a.shape()[0])
        .map(|i| a.row(i))
        .chain((0..b.shape()[0]).map(|i| b.row(i)))
        .collect();
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = rows[i][k] - rows[j][k];
                s += diff * diff;
            }
            dists.push(s);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|p, q| p.partial_cmp(q).expect("contract error: NaN distance"));
    let med = dists[dists.len() / 2];
    if med.is_finite() && med > 1e-12 {
        med
    } else {
        1.0
    }
}

/// Joint kernel mean discrepancy between two stacks of network layers.
///
/// Kernels of corresponding layers multiply elementwise, the squared
/// RKHS distance of the two empirical means is estimated with the biased
/// V-statistic. Non-negative up to rounding for any PSD kernel ladder.
pub fn jmmd_loss(tape: &mut Tape, s_layers: &[Var], t_layers: &[Var], cfg: &KernelConfig) -> Var {
    assert!(
        !s_layers.is_empty() && s_layers.len() == t_layers.len(),
        "contract error: layer stacks must match and be non-empty"
    );
    let mut k_ss: Option<Var> = None;
    let mut k_tt: Option<Var> = None;
    let mut k_st: Option<Var> = None;
    for (&s, &t) in s_layers.iter().zip(t_layers) {
        assert_eq!(
            tape.value(s).shape()[1],
            tape.value(t).shape()[1],
            "dimension error: layer widths differ between domains"
        );
        let base = match cfg.bandwidth {
            Bandwidth::Fixed(v) => v,
            Bandwidth::Median => median_bandwidth(tape.value(s), tape.value(t)),
        };
        let d_ss = pairwise_sqdist(tape, s, s);
        let d_tt = pairwise_sqdist(tape, t, t);
        let d_st = pairwise_sqdist(tape, s, t);
        let g_ss = multi_kernel(tape, d_ss, base, &cfg.multipliers);
        let g_tt = multi_kernel(tape, d_tt, base, &cfg.multipliers);
        let g_st = multi_kernel(tape, d_st, base, &cfg.multipliers);
        k_ss = Some(match k_ss {
            None => g_ss,
            Some(prev) => tape.mul(prev, g_ss),
        });
        k_tt = Some(match k_tt {
            None => g_tt,
            Some(prev) => tape.mul(prev, g_tt),
        });
        k_st = Some(match k_st {
            None => g_st,
            Some(prev) => tape.mul(prev, g_st),
        });
    }
    let m_ss = tape.mean(k_ss.expect("non-empty"));
    let m_tt = tape.mean(k_tt.expect("non-empty"));
    let m_st = tape.mean(k_st.expect("non-empty"));
    let both = tape.add(m_ss, m_tt);
    let cross = tape.scale(m_st, -2.0);
    tape.add(both, cross)
}

/// Scalar hyperparameters of one optimization round.
#[derive(Clone, Debug)]
pub struct AdversarialHyper {
    /// Effective adversarial weight (base value times warmup).
    pub lambda: f64,
    /// Weight of the kernel alignment penalty.
    pub beta: f64,
    /// Gradient-reversal strength; 1 during training.
    pub grl_lambda: f64,
    pub kernel: KernelConfig,
}

impl AdversarialHyper {
    pub fn plain_supervised() -> Self {
        AdversarialHyper {
            lambda: 0.0,
            beta: 0.0,
            grl_lambda: 1.0,
            kernel: KernelConfig::default(),
        }
    }
}

/// Component values of one round's objective, as plain numbers.
///
/// `total` is reconstructed from the components, so
/// `total = l_cls - lambda * l_cdan + beta * l_align` holds exactly as
/// written here; the tape's own total may differ by rounding in the last
/// couple of bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_cdan: f64,
    pub l_align: f64,
    pub total: f64,
}

/// The built objective graph: the differentiable total plus handles to
/// whatever intermediate nodes downstream code needs to seed or inspect.
pub struct LossGraph {
    pub total: Var,
    pub l_cls: Var,
    pub l_cdan: Option<Var>,
    pub l_align: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// Latent inputs to one round's objective.
pub struct LossInputs<'a> {
    /// Source latent features `[n_s, d_f]`.
    pub f_s: Var,
    /// Target latent features `[n_t, d_f]`.
    pub f_t: Var,
    pub labels_s: &'a [u32],
}

/// Build the full objective on the tape.
///
/// `f_s` and `f_t` may be leaves (the coordinator's view, where latents
/// arrive over the wire) or extractor outputs (a monolithic model). Either
/// way the graph above them is identical, so gradients at those nodes
/// match bit for bit between the two deployments.
///
/// A zero `lambda` or `beta` skips the corresponding subgraph entirely:
/// its parameters then receive exactly zero gradient and the breakdown
/// records the component as 0.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    inputs: &LossInputs,
    c_vars: &MlpVars,
    c_params: &MlpParams,
    d_vars: &MlpVars,
    d_params: &MlpParams,
    rml: Option<&RandomMap>,
    hyper: &AdversarialHyper,
) -> LossGraph {
    let n_s = tape.value(inputs.f_s).shape()[0];
    let n_t = tape.value(inputs.f_t).shape()[0];
    assert!(n_s > 0 && n_t > 0, "contract error: empty batch");

    let c_outs_s = mlp_forward(tape, c_vars, c_params, inputs.f_s);
    let c_outs_t = mlp_forward(tape, c_vars, c_params, inputs.f_t);
    let logits_s = *c_outs_s.last().expect("contract error: empty classifier");
    let logits_t = *c_outs_t.last().expect("contract error: empty classifier");
    // deepest hidden representation; the latent itself for a linear classifier
    let hid_s = if c_outs_s.len() >= 2 {
        c_outs_s[c_outs_s.len() - 2]
    } else {
        inputs.f_s
    };
    let hid_t = if c_outs_t.len() >= 2 {
        c_outs_t[c_outs_t.len() - 2]
    } else {
        inputs.f_t
    };

    let l_cls = tape.cross_entropy(logits_s, inputs.labels_s);
    let mut total = l_cls;

    let p_s = tape.softmax_rows(logits_s);
    let p_t = tape.softmax_rows(logits_t);

    let mut l_cdan_var = None;
    if hyper.lambda != 0.0 {
        let l_cdan = cdan_loss(
            tape,
            inputs.f_s,
            p_s,
            inputs.f_t,
            p_t,
            d_vars,
            d_params,
            rml,
            hyper.grl_lambda,
        );
        let scaled = tape.scale(l_cdan, -hyper.lambda);
        total = tape.add(total, scaled);
        l_cdan_var = Some(l_cdan);
    }

    let mut l_align_var = None;
    if hyper.beta != 0.0 {
        let l_align = jmmd_loss(tape, &[hid_s, p_s], &[hid_t, p_t], &hyper.kernel);
        let scaled = tape.scale(l_align, hyper.beta);
        total = tape.add(total, scaled);
        l_align_var = Some(l_align);
    }

    let l_cls_v = tape.scalar_value(l_cls);
    let l_cdan_v = l_cdan_var.map_or(0.0, |v| tape.scalar_value(v));
    let l_align_raw = l_align_var.map_or(0.0, |v| tape.scalar_value(v));
    assert!(
        l_align_raw >= -1e-9,
        "contract error: kernel alignment estimate {l_align_raw} is negative beyond rounding"
    );
    let l_align_v = l_align_raw.max(0.0);
    let breakdown = LossBreakdown {
        l_cls: l_cls_v,
        l_cdan: l_cdan_v,
        l_align: l_align_v,
        total: l_cls_v - hyper.lambda * l_cdan_v + hyper.beta * l_align_v,
    };
    LossGraph {
        total,
        l_cls,
        l_cdan: l_cdan_var,
        l_align: l_align_var,
        breakdown,
    }
}
