//! Finite-difference sweep over every differentiable primitive plus the
//! composed fusion block and the three representation losses.

use crate::error::Result;
use crate::losses::{dynamics_loss, fusion_loss, reconstruction_loss, EnsembleDynamics, FusionPenalty, LossWeights};
use crate::model::{ConvSpec, FusionModel, ModelConfig};
use mvfuse_tensor::{grad_check, Bindings, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GRAD_THRESHOLD: f64 = 1e-4;
/// Linear ops are differentiated exactly by central differences, up to roundoff.
pub const EXACT_THRESHOLD: f64 = 1e-8;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub threshold: f64,
    pub max_rel_error: f64,
    /// Input with the largest relative error.
    pub worst_input: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub cases: Vec<GradCase>,
    pub failures: usize,
    pub worst_case: String,
    pub worst_input: String,
    pub max_rel_error: f64,
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> mvfuse_tensor::Result<Var>>;

struct Case {
    name: &'static str,
    threshold: f64,
    inputs: Vec<(String, Tensor)>,
    f: CaseFn,
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> mvfuse_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(tape.shape(y).to_vec(), -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn uniform(shapes: &[&[usize]], lo: f64, hi: f64, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().enumerate().map(|(i, s)| (format!("x{i}"), Tensor::uniform(s.to_vec(), lo, hi, &mut rng))).collect()
}

macro_rules! unary {
    ($name:expr, $shape:expr, $lo:expr, $hi:expr, |$t:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            threshold: GRAD_THRESHOLD,
            inputs: uniform(&[&$shape], $lo, $hi, 1),
            f: Box::new(|$t: &mut Tape, v: &[Var]| {
                let $x = v[0];
                let y = $body;
                weighted_sum($t, y, 99)
            }),
        }
    };
}

macro_rules! binary {
    ($name:expr, $a:expr, $b:expr, |$t:ident, $x:ident, $y:ident| $body:expr) => {
        Case {
            name: $name,
            threshold: GRAD_THRESHOLD,
            inputs: uniform(&[&$a, &$b], -1.0, 1.0, 2),
            f: Box::new(|$t: &mut Tape, v: &[Var]| {
                let ($x, $y) = (v[0], v[1]);
                let out = $body;
                weighted_sum($t, out, 99)
            }),
        }
    };
}

fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "identity",
            threshold: EXACT_THRESHOLD,
            inputs: uniform(&[&[6]], -2.0, 2.0, 0),
            f: Box::new(|t, v| {
                let y = t.reshape(v[0], &[2, 3])?;
                weighted_sum(t, y, 99)
            }),
        },
        binary!("add", [3, 4], [4], |t, a, b| t.add(a, b)?),
        binary!("sub", [2, 1, 3], [4, 1], |t, a, b| t.sub(a, b)?),
        binary!("mul", [3, 4], [3, 1], |t, a, b| t.mul(a, b)?),
        binary!("minimum", [5, 3], [5, 3], |t, a, b| t.minimum(a, b)?),
        binary!("matmul", [3, 2, 4], [3, 4, 2], |t, a, b| t.matmul(a, b)?),
        binary!("cosine_similarity", [4, 6], [4, 6], |t, a, b| t.cosine_similarity(a, b)?),
        unary!("scale", [6], -2.0, 2.0, |t, x| t.scale(x, -1.7)),
        unary!("neg", [6], -2.0, 2.0, |t, x| t.neg(x)),
        unary!("exp", [6], -2.0, 2.0, |t, x| t.exp(x)),
        unary!("log", [6], 0.2, 3.0, |t, x| t.log(x)?),
        unary!("abs", [6], -2.0, 2.0, |t, x| t.abs(x)),
        unary!("tanh", [6], -2.0, 2.0, |t, x| t.tanh(x)),
        unary!("relu", [8], -2.0, 2.0, |t, x| t.relu(x)),
        unary!("gelu", [8], -3.0, 3.0, |t, x| t.gelu(x)),
        unary!("clamp", [8], -2.0, 2.0, |t, x| t.clamp(x, -0.8, 0.9)?),
        unary!("huber", [10], -3.0, 3.0, |t, x| t.huber(x, 1.0)?),
        unary!("softmax", [3, 5], -2.0, 2.0, |t, x| t.softmax(x)?),
        unary!("log_softmax", [3, 5], -2.0, 2.0, |t, x| t.log_softmax(x)?),
        unary!("layer_norm", [2, 8], -2.0, 2.0, |t, x| t.layer_norm(x)?),
        unary!("l2_normalize", [4, 6], -2.0, 2.0, |t, x| t.l2_normalize(x)?),
        unary!("transpose", [2, 3, 4], -1.0, 1.0, |t, x| t.transpose(x, 0, 2)?),
        unary!("permute", [2, 3, 4], -1.0, 1.0, |t, x| t.permute(x, &[1, 2, 0])?),
        unary!("slice", [3, 5], -1.0, 1.0, |t, x| t.slice(x, 1, 1, 3)?),
        unary!("gather_rows", [4, 3], -1.0, 1.0, |t, x| t.gather_rows(x, &[3, 0, 3, 1])?),
        unary!("concat", [2, 3], -1.0, 1.0, |t, x| t.concat(&[x, x], 1)?),
        unary!("sum_last", [3, 4], -1.0, 1.0, |t, x| t.sum_last(x)?),
        Case {
            name: "mean",
            threshold: GRAD_THRESHOLD,
            inputs: uniform(&[&[3, 4]], -1.0, 1.0, 3),
            f: Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }),
        },
        Case {
            name: "conv2d",
            threshold: GRAD_THRESHOLD,
            inputs: uniform(&[&[2, 3, 7, 6], &[4, 3, 3, 3], &[4]], -1.0, 1.0, 4),
            f: Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(t, y, 99)
            }),
        },
        Case {
            name: "stop_gradient",
            threshold: GRAD_THRESHOLD,
            inputs: {
                let mut x = uniform(&[&[5], &[5]], -1.0, 1.0, 5);
                x[1].0 = "target".into();
                x
            },
            f: Box::new(|t, v| {
                let d = t.stop_gradient(v[1]);
                let y = t.mul(v[0], d)?;
                weighted_sum(t, y, 99)
            }),
        },
    ]
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Result<FusionModel> {
    let cfg = ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        conv: vec![ConvSpec { filters: 2, kernel: 3, stride: 2 }],
        ..ModelConfig::default()
    };
    FusionModel::new(&cfg, 2, crate::envs::CHANNELS, 4, rng)
}

fn with_params(head: Vec<(String, Tensor)>, stores: &[&mvfuse_tensor::ParamStore]) -> Vec<(String, Tensor)> {
    let mut inputs = head;
    for s in stores {
        inputs.extend(s.iter().map(|p| (p.name.clone(), p.value.clone())));
    }
    inputs
}

// Stop-gradient targets are excluded: they have no reverse-mode gradient by
// design, while finite differences still see them.
fn detached_inputs(name: &str) -> bool {
    matches!(name, "next" | "target")
}

fn composite_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = tiny_model(&mut rng)?;
    let ens = EnsembleDynamics::new(8, 3, 6, 2, &mut rng)?;
    let n_model = model.params().len();
    let emb = Tensor::randn([3, 2, 8], 1.0, &mut rng);
    let weights = Tensor::randn([3, 3, 8], 1.0, &mut rng);
    let rewards = vec![0.3, -0.5, 1.2];
    let actions = vec![2usize, 0, 1];
    let huber = LossWeights { gamma: 0.9, ..LossWeights::default() };
    let squared = LossWeights { penalty: FusionPenalty::Squared, ..huber.clone() };

    let m1 = model.clone();
    let w1 = weights.clone();
    let attention = Case {
        name: "attention_fusion_block",
        threshold: GRAD_THRESHOLD,
        inputs: with_params(vec![("embeddings".into(), emb.clone())], &[model.params()]),
        f: Box::new(move |t, v| {
            let p = Bindings::from_vars(v[1..].to_vec());
            let out = m1.fuse(t, &p, v[0]).map_err(mvfuse_tensor::TensorError::from)?;
            let pred = m1.predict(t, &p, out.tokens).map_err(mvfuse_tensor::TensorError::from)?;
            let w = t.constant(w1.clone());
            let y = t.mul(pred, w)?;
            let s = t.sum(y);
            let f = t.sum(out.fused);
            let f = t.scale(f, 0.7);
            t.add(s, f)
        }),
    };

    let zs = uniform(&[&[3, 8], &[3, 8]], -1.0, 1.0, 12);
    let fusion_cases: Vec<Case> = [("fusion_loss_huber", huber.clone()), ("fusion_loss_squared", squared)]
        .into_iter()
        .map(|(name, w)| {
            let r = rewards.clone();
            Case {
                name,
                threshold: GRAD_THRESHOLD,
                inputs: vec![("z".into(), zs[0].1.clone()), ("next".into(), zs[1].1.clone())],
                f: Box::new(move |t, v| {
                    let next = t.value(v[1]).clone();
                    fusion_loss(t, v[0], &r, &next, &w).map_err(mvfuse_tensor::TensorError::from)
                }),
            }
        })
        .collect();

    let recon = Case {
        name: "reconstruction_loss",
        threshold: GRAD_THRESHOLD,
        inputs: {
            let mut x = uniform(&[&[2, 3, 4], &[2, 3, 4]], -1.0, 1.0, 13);
            x[0].0 = "pred".into();
            x[1].0 = "target".into();
            x
        },
        f: Box::new(|t, v| reconstruction_loss(t, v[0], v[1]).map_err(mvfuse_tensor::TensorError::from)),
    };

    let e1 = ens.clone();
    let a1 = actions.clone();
    let dynamics = Case {
        name: "dynamics_loss",
        threshold: GRAD_THRESHOLD,
        inputs: with_params(vec![("z".into(), zs[0].1.clone()), ("next".into(), zs[1].1.clone())], &[ens.params()]),
        f: Box::new(move |t, v| {
            let p = Bindings::from_vars(v[2..].to_vec());
            dynamics_loss(t, &e1, &p, v[0], &a1, v[1]).map_err(mvfuse_tensor::TensorError::from)
        }),
    };

    // Fused state feeds all three losses at once, as in a training step.
    let target_tokens = Tensor::randn([3, 3, 8], 1.0, &mut rng);
    let next = Tensor::randn([3, 8], 1.0, &mut rng);
    let (m2, e2, r2, a2, w2) = (model.clone(), ens.clone(), rewards, actions, huber);
    let composite = Case {
        name: "fusion_block_with_all_losses",
        threshold: GRAD_THRESHOLD,
        inputs: with_params(
            vec![("embeddings".into(), emb), ("target".into(), target_tokens), ("next".into(), next)],
            &[model.params(), ens.params()],
        ),
        f: Box::new(move |t, v| {
            let mp = Bindings::from_vars(v[3..3 + n_model].to_vec());
            let ep = Bindings::from_vars(v[3 + n_model..].to_vec());
            let out = m2.fuse(t, &mp, v[0]).map_err(mvfuse_tensor::TensorError::from)?;
            let pred = m2.predict(t, &mp, out.tokens).map_err(mvfuse_tensor::TensorError::from)?;
            let next = t.value(v[2]).clone();
            let fus = fusion_loss(t, out.fused, &r2, &next, &w2).map_err(mvfuse_tensor::TensorError::from)?;
            let rec = reconstruction_loss(t, pred, v[1]).map_err(mvfuse_tensor::TensorError::from)?;
            let dyn_ = dynamics_loss(t, &e2, &ep, out.fused, &a2, v[2]).map_err(mvfuse_tensor::TensorError::from)?;
            let s = t.add(fus, rec)?;
            t.add(s, dyn_)
        }),
    };

    let mut cases = vec![attention];
    cases.extend(fusion_cases);
    cases.extend([recon, dynamics, composite]);
    Ok(cases)
}

/// Runs every case; never short-circuits, so the report names all failures.
pub fn grad_suite() -> Result<GradSuiteReport> {
    let mut cases = primitive_cases();
    cases.extend(composite_cases()?);
    let mut out = Vec::with_capacity(cases.len());
    for c in &cases {
        let named: Vec<(&str, Tensor)> = c.inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let report = grad_check(&c.f, &named, STEP)?;
        let (worst_input, max_rel_error) = report
            .entries
            .iter()
            .filter(|e| !detached_inputs(&e.name) || e.max_abs_analytic != 0.0)
            .map(|e| (e.name.clone(), if e.non_finite { f64::INFINITY } else { e.rel_error }))
            .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 || acc.0.is_empty() { x } else { acc });
        out.push(GradCase {
            name: c.name.to_string(),
            threshold: c.threshold,
            passed: max_rel_error < c.threshold,
            max_rel_error,
            worst_input,
        });
    }
    let worst = out
        .iter()
        .max_by(|a, b| (a.max_rel_error / a.threshold).total_cmp(&(b.max_rel_error / b.threshold)))
        .cloned()
        .expect("suite is non-empty");
    Ok(GradSuiteReport {
        failures: out.iter().filter(|c| !c.passed).count(),
        worst_case: worst.name,
        worst_input: worst.worst_input,
        max_rel_error: out.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        cases: out,
    })
}
