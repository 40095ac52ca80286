use super::layers::{LayerNorm, Linear, Mlp};
use super::{ConvSpec, MissingViewMode, ModelConfig};
use crate::envs::MultiViewObservation;
use crate::error::{invalid, Result};
use mvfuse_tensor::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the reconstruction targets are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Same weights as the online branch, gradients blocked.
    StopGradient,
    /// A moving-average copy of the online weights.
    Momentum,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Fused embedding `[B, d]` (unit rows) and all output tokens `[B, K+1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    cfg: ModelConfig,
    n_views: usize,
    channels: usize,
    size: usize,
    store: ParamStore,
    target: Option<ParamStore>,
    convs: Vec<Conv>,
    proj: Linear,
    state_token: ParamId,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<Block>,
    head: Mlp,
}

fn same_pad_out(size: usize, spec: &ConvSpec) -> usize {
    (size + 2 * (spec.kernel / 2) - spec.kernel) / spec.stride + 1
}

impl FusionModel {
    /// Builds a model for `n_views` square views of `channels × size × size`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        n_views: usize,
        channels: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_views == 0 || channels == 0 || size == 0 {
            return Err(invalid("model needs at least one non-empty view"));
        }
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let (mut ch, mut hw) = (channels, size);
        for (i, spec) in cfg.conv.iter().enumerate() {
            if spec.kernel > hw + 2 * (spec.kernel / 2) {
                return Err(invalid(format!("model.conv[{i}] kernel larger than its {hw}px input")));
            }
            let fan_in = ch * spec.kernel * spec.kernel;
            let w = store.add(
                format!("enc.conv{i}.w"),
                Tensor::randn([spec.filters, ch, spec.kernel, spec.kernel], (2.0 / fan_in as f64).sqrt(), rng),
            );
            let b = store.add(format!("enc.conv{i}.b"), Tensor::zeros([spec.filters]));
            convs.push(Conv { w, b, spec: *spec });
            ch = spec.filters;
            hw = same_pad_out(hw, spec);
        }
        let proj = Linear::new(&mut store, "enc.proj", ch * hw * hw, d, rng);
        let state_token = store.add("state_token", Tensor::randn([1, d], 0.02, rng));
        let pos = store.add("pos_embed", Tensor::randn([n_views + 1, d], 0.02, rng));
        let mask_token = store.add("mask_token", Tensor::randn([1, d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut store, &format!("block{l}.ln1"), d),
                qkv: Linear::new(&mut store, &format!("block{l}.qkv"), d, 3 * d, rng),
                out: Linear::new(&mut store, &format!("block{l}.out"), d, d, rng),
                ln2: LayerNorm::new(&mut store, &format!("block{l}.ln2"), d),
                mlp: Mlp::new(&mut store, &format!("block{l}.mlp"), [d, cfg.mlp_ratio * d, d], rng),
            })
            .collect();
        let head = Mlp::new(&mut store, "head", [d, d, d], rng);
        let target = (cfg.target == super::TargetMode::Momentum).then(|| store.clone());
        Ok(Self {
            cfg: cfg.clone(),
            n_views,
            channels,
            size,
            store,
            target,
            convs,
            proj,
            state_token,
            pos,
            mask_token,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weights producing reconstruction targets: the momentum copy, or the
    /// online weights in stop-gradient mode.
    pub fn target_params(&self) -> &ParamStore {
        self.target.as_ref().unwrap_or(&self.store)
    }

    pub fn target_params_mut(&mut self) -> Option<&mut ParamStore> {
        self.target.as_mut()
    }

    /// Moves the momentum copy towards the online weights; no-op otherwise.
    pub fn update_target(&mut self) {
        if let Some(t) = &mut self.target {
            t.ema_update(&self.store, self.cfg.ema_rate);
        }
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.mask_token
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos
    }

    fn check(&self, batch: &[&MultiViewObservation]) -> Result<()> {
        if batch.is_empty() {
            return Err(invalid("empty observation batch"));
        }
        let len = self.channels * self.size * self.size;
        for obs in batch {
            if obs.n_views() != self.n_views || obs.validity.len() != self.n_views {
                return Err(invalid(format!("expected {} views, got {}", self.n_views, obs.n_views())));
            }
            if obs.channels != self.channels || obs.height != self.size || obs.width != self.size {
                return Err(invalid(format!(
                    "expected {}x{}x{} views, got {}x{}x{}",
                    self.channels, self.size, self.size, obs.channels, obs.height, obs.width
                )));
            }
            if let Some(v) = obs.views.iter().find(|v| v.len() != len) {
                return Err(invalid(format!("view buffer of {} values, expected {len}", v.len())));
            }
        }
        Ok(())
    }

    /// Per-view embeddings `[B, K, d]`; missing slots hold the mask token.
    pub fn encode_views(&self, tape: &mut Tape, p: &Bindings, batch: &[&MultiViewObservation]) -> Result<Var> {
        self.check(batch)?;
        let (k, d) = (self.n_views, self.cfg.embed_dim);
        let pixel_mode = self.cfg.missing_view == MissingViewMode::Pixel;
        let len = self.channels * self.size * self.size;
        let mut pixels = Vec::new();
        // Row of each (sample, view) slot in [encoded..., mask_token].
        let mut slot = Vec::with_capacity(batch.len() * k);
        let mut encoded = 0;
        let mut missing = Vec::new();
        for obs in batch {
            for v in 0..k {
                if obs.is_missing(v) && !pixel_mode {
                    missing.push(slot.len());
                    slot.push(usize::MAX);
                } else {
                    if obs.is_missing(v) {
                        pixels.extend(std::iter::repeat_n(0.0, len));
                    } else {
                        pixels.extend_from_slice(&obs.views[v]);
                    }
                    slot.push(encoded);
                    encoded += 1;
                }
            }
        }
        for i in missing {
            slot[i] = encoded;
        }
        let mask_row = tape.reshape(p[self.mask_token], &[1, d])?;
        let rows = if encoded == 0 {
            mask_row
        } else {
            let x = tape.constant(Tensor::new([encoded, self.channels, self.size, self.size], pixels)?);
            let e = self.encode_pixels(tape, p, x)?;
            tape.concat(&[e, mask_row], 0)?
        };
        let g = tape.gather_rows(rows, &slot)?;
        Ok(tape.reshape(g, &[batch.len(), k, d])?)
    }

    /// Shared CNN on `[M, C, H, W]`, returning `[M, d]`.
    fn encode_pixels(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let m = tape.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = tape.conv2d(h, p[c.w], Some(p[c.b]), c.spec.stride, c.spec.kernel / 2)?;
            h = tape.relu(h);
        }
        let flat = tape.value(h).numel() / m;
        let h = tape.reshape(h, &[m, flat])?;
        self.proj.forward(tape, p, h)
    }

    /// Prepends the state token, adds positions, runs the attention stack.
    pub fn fuse(&self, tape: &mut Tape, p: &Bindings, emb: Var) -> Result<FusionOutput> {
        let s = tape.shape(emb).to_vec();
        let (k, d) = (self.n_views, self.cfg.embed_dim);
        if s.len() != 3 || s[1] != k || s[2] != d {
            return Err(invalid(format!("fuse expects [B, {k}, {d}] embeddings, got {s:?}")));
        }
        let b = s[0];
        let st = tape.gather_rows(p[self.state_token], &vec![0; b])?;
        let st = tape.reshape(st, &[b, 1, d])?;
        let z = tape.concat(&[st, emb], 1)?;
        let mut z = tape.add(z, p[self.pos])?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, p, z)?;
            let h = self.attention(tape, p, blk, h)?;
            z = tape.add(z, h)?;
            let h = blk.ln2.forward(tape, p, z)?;
            let h = blk.mlp.forward(tape, p, h)?;
            z = tape.add(z, h)?;
        }
        let first = tape.slice(z, 1, 0, 1)?;
        let first = tape.reshape(first, &[b, d])?;
        let fused = tape.l2_normalize(first)?;
        Ok(FusionOutput { fused, tokens: z })
    }

    fn attention(&self, tape: &mut Tape, p: &Bindings, blk: &Block, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let h = self.cfg.heads;
        let dh = d / h;
        let qkv = blk.qkv.forward(tape, p, x)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let v = tape.slice(qkv, 0, i, 1)?;
            *part = tape.reshape(v, &[b * h, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let o = tape.matmul(attn, v)?;
        let o = tape.reshape(o, &[b, h, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, t, d])?;
        blk.out.forward(tape, p, o)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, batch: &[&MultiViewObservation]) -> Result<FusionOutput> {
        let emb = self.encode_views(tape, p, batch)?;
        self.fuse(tape, p, emb)
    }

    /// Token-wise prediction head over `[B, K+1, d]`.
    pub fn predict(&self, tape: &mut Tape, p: &Bindings, tokens: Var) -> Result<Var> {
        self.head.forward(tape, p, tokens)
    }

    /// Fused embeddings `[B, d]` without gradient tracking.
    pub fn embed(&self, batch: &[&MultiViewObservation]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, batch)?;
        Ok(tape.value(out.fused).clone())
    }

    /// Like [`FusionModel::embed`] but with the target weights.
    pub fn embed_target(&self, batch: &[&MultiViewObservation]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.target_params().bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, batch)?;
        Ok(tape.value(out.fused).clone())
    }
}
