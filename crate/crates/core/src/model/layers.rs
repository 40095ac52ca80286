//! Parameterised building blocks over a shared [`ParamStore`].

use crate::error::Result;
use mvfuse_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn([fan_in, fan_out], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// `x[.., fan_in] -> [.., fan_out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(tape.add(y, p[self.b])?)
    }
}

/// Layer normalisation with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x)?;
        let y = tape.mul(y, p[self.gain])?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}
