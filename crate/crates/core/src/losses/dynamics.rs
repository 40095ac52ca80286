use crate::error::{invalid, Result};
use crate::model::layers::Mlp;
use mvfuse_tensor::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Deterministic next-latent predictors with unit-norm outputs.
#[derive(Clone, Debug)]
pub struct EnsembleDynamics {
    store: ParamStore,
    members: Vec<Mlp>,
    dim: usize,
    n_actions: usize,
}

impl EnsembleDynamics {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_actions: usize, hidden: usize, size: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || n_actions == 0 || hidden == 0 || size == 0 {
            return Err(invalid("ensemble dimensions must be positive"));
        }
        let mut store = ParamStore::new();
        let members = (0..size)
            .map(|k| Mlp::new(&mut store, &format!("member{k}"), [dim + n_actions, hidden, dim], rng))
            .collect();
        Ok(Self { store, members, dim, n_actions })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn one_hot(&self, actions: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::zeros([actions.len(), self.n_actions]);
        for (i, &a) in actions.iter().enumerate() {
            if a >= self.n_actions {
                return Err(invalid(format!("action {a} out of range for {} actions", self.n_actions)));
            }
            t.data_mut()[i * self.n_actions + a] = 1.0;
        }
        Ok(t)
    }

    /// Member `k`'s unit-norm prediction `[B, d]` from latents `z: [B, d]`.
    pub fn predict(&self, tape: &mut Tape, p: &Bindings, k: usize, z: Var, actions: &[usize]) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s != [actions.len(), self.dim] {
            return Err(invalid(format!("latents {s:?} do not match {} actions of dim {}", actions.len(), self.dim)));
        }
        let a = tape.constant(self.one_hot(actions)?);
        let x = tape.concat(&[z, a], 1)?;
        let y = self.members[k].forward(tape, p, x)?;
        Ok(tape.l2_normalize(y)?)
    }

    /// Draws one member uniformly and predicts without gradient tracking.
    pub fn sample_prediction<R: Rng + ?Sized>(
        &self,
        z: &Tensor,
        actions: &[usize],
        rng: &mut R,
    ) -> Result<(usize, Tensor)> {
        let k = rng.random_range(0..self.members.len());
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let y = self.predict(&mut tape, &p, k, zv, actions)?;
        Ok((k, tape.value(y).clone()))
    }
}

/// `(1/K)·Σ_k mean_b [1 − cos(P_k(z, a), z′)]`; `z′` is detached.
pub fn dynamics_loss(
    tape: &mut Tape,
    ensemble: &EnsembleDynamics,
    p: &Bindings,
    z: Var,
    actions: &[usize],
    z_next: Var,
) -> Result<Var> {
    if actions.is_empty() {
        return Err(invalid("dynamics loss needs a nonempty batch"));
    }
    let target = tape.stop_gradient(z_next);
    let mut total: Option<Var> = None;
    for k in 0..ensemble.len() {
        let y = ensemble.predict(tape, p, k, z, actions)?;
        let cos = tape.cosine_similarity(y, target)?;
        let m = tape.mean(cos);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let mean = tape.scale(total.expect("nonempty ensemble"), -1.0 / ensemble.len() as f64);
    Ok(tape.add_scalar(mean, 1.0))
}
