//! Duration prediction and learned token-to-frame upsampling.
//!
//! Durations are real-valued and every step from `d` to the upsampled
//! representation `O` is differentiable: token boundaries are cumulative
//! sums, the boundary grids are affine in them, and the attention matrix is
//! a softmax over small per-cell MLPs fed with grid distances and a
//! convolution of the token representations.

use rand::Rng;

use crate::autodiff::nn::{Conv1d, Linear, Mode, Norm, NormKind, NormUpdate};
use crate::autodiff::{Graph, ParameterStore, Real, Tensor, Var};
use crate::{Error, Result};

/// Width of the auxiliary context per (frame, token) cell.
pub const CONTEXT_DIM: usize = 2;
/// Output channels of the shared convolution over `V`.
pub const CONV_CHANNELS: usize = 8;
/// Hidden width of the attention MLP.
pub const ATTENTION_HIDDEN: usize = 16;
const CELL_INPUT: usize = CONV_CHANNELS + 2;

/// Token representations with their (real-valued) durations.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `K×M`.
    pub v: Tensor<T>,
    /// `K`, nonnegative.
    pub d: Tensor<T>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(v: Tensor<T>, d: Tensor<T>) -> Result<Self> {
        let (k, _) = v.dims2("token_sequence")?;
        if k == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if d.shape() != [k] {
            return Err(Error::shape(
                "token_sequence",
                format!("d {:?} for {k} tokens", d.shape()),
            ));
        }
        if d.data().iter().any(|&x| x.is_nan() || x < T::zero()) {
            return Err(Error::InvalidArgument(
                "durations must be nonnegative".into(),
            ));
        }
        Ok(TokenSequence { v, d })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// Every intermediate of one upsampling pass, as plain tensors.
#[derive(Debug, Clone)]
pub struct AlignmentBundle<T> {
    pub s: Tensor<T>,
    pub e: Tensor<T>,
    /// `T×K`, `t − s_k`.
    pub grid_s: Tensor<T>,
    /// `T×K`, `e_k − t`.
    pub grid_e: Tensor<T>,
    /// `T×K`, rows sum to one.
    pub w: Tensor<T>,
    /// `T×K×P`.
    pub c: Tensor<T>,
    /// `P×M`.
    pub a: Tensor<T>,
    /// `T×M`.
    pub o: Tensor<T>,
}

/// `(s, e)` with `s_k = Σ_{i<k} d_i` and `e_k = s_k + d_k`.
pub fn token_boundaries<T: Real>(d: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let s = g.exclusive_cumsum(dv)?;
    let e = g.add(s, dv)?;
    Ok((g.value(s).clone(), g.value(e).clone()))
}

/// `S_{t,k} = t − s_k`, `E_{t,k} = e_k − t` for `t ∈ 0..frames`.
pub fn boundary_grids<T: Real>(
    s: &Tensor<T>,
    e: &Tensor<T>,
    frames: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if s.shape() != e.shape() {
        return Err(Error::shape(
            "boundary_grids",
            format!("{:?} vs {:?}", s.shape(), e.shape()),
        ));
    }
    let mut g = Graph::new();
    let (sv, ev) = (g.input(s.clone()), g.input(e.clone()));
    let gs = g.frame_offset(sv, frames, false)?;
    let ge = g.frame_offset(ev, frames, true)?;
    Ok((g.value(gs).clone(), g.value(ge).clone()))
}

/// `|T − Σ d| / K`.
pub fn duration_loss<T: Real>(d: &Tensor<T>, frames: usize) -> Result<T> {
    let mut g = Graph::new();
    let dv = g.input(d.clone());
    let l = duration_loss_node(&mut g, dv, frames)?;
    Ok(g.scalar(l))
}

/// Graph form of [`duration_loss`] for a length-`K` node.
pub fn duration_loss_node<T: Real>(g: &mut Graph<T>, d: Var, frames: usize) -> Result<Var> {
    let k = g.value(d).len();
    if k == 0 {
        return Err(Error::Empty("durations"));
    }
    let total = g.sum(d);
    let resid = g.add_scalar(total, T::of(-(frames as f64)));
    let a = g.abs(resid);
    Ok(g.scale(a, T::of(1.0 / k as f64)))
}

/// `max(1, round_half_up(Σ d))`.
pub fn inferred_frame_count<T: Real>(d: &Tensor<T>) -> usize {
    let total = d.data().iter().map(|x| x.as_f64()).sum::<f64>();
    let r = (total + 0.5).floor();
    if r < 1.0 {
        1
    } else {
        r as usize
    }
}

/// `O = W·V + (Σ_k W_{t,k} C_{t,k,:})·A`, with `C` shaped `T×K×P`.
pub fn upsample<T: Real>(
    w: &Tensor<T>,
    v: &Tensor<T>,
    c: &Tensor<T>,
    a: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (t, k) = w.dims2("upsample")?;
    if c.rank() != 3 || c.shape()[0] != t || c.shape()[1] != k {
        return Err(Error::shape(
            "upsample",
            format!("context {:?} vs attention {t}x{k}", c.shape()),
        ));
    }
    let p = c.shape()[2];
    let mut g = Graph::new();
    let (wv, vv, av) = (g.input(w.clone()), g.input(v.clone()), g.input(a.clone()));
    let cv = g.input(c.clone().reshape(vec![t * k, p])?);
    let o = upsample_node(&mut g, wv, vv, cv, av)?;
    Ok(g.value(o).clone())
}

/// Graph form of [`upsample`]; `c` is `(T·K)×P`.
pub fn upsample_node<T: Real>(g: &mut Graph<T>, w: Var, v: Var, c: Var, a: Var) -> Result<Var> {
    let wv = g.matmul(w, v)?;
    let ctx = g.weighted_context(w, c)?;
    let proj = g.matmul(ctx, a)?;
    g.add(wv, proj)
}

/// Hard upsampling: row `k` of `v` repeated `durs[k]` times.
pub fn length_regulator<T: Real>(v: &Tensor<T>, durs: &[usize]) -> Result<Tensor<T>> {
    let (k, m) = v.dims2("length_regulator")?;
    if durs.len() != k {
        return Err(Error::shape(
            "length_regulator",
            format!("{} durations for {k} tokens", durs.len()),
        ));
    }
    let mut out = Vec::new();
    for (row, &n) in durs.iter().enumerate() {
        for _ in 0..n {
            out.extend_from_slice(v.row(row));
        }
    }
    let t = durs.iter().sum::<usize>();
    Tensor::new(vec![t, m], out)
}

/// `T×K` indicator of which token each frame belongs to under integer durations.
pub fn indicator_attention<T: Real>(durs: &[usize]) -> Tensor<T> {
    let t: usize = durs.iter().sum();
    let k = durs.len();
    let mut w = Tensor::zeros(vec![t, k]);
    let mut frame = 0;
    for (tok, &n) in durs.iter().enumerate() {
        for _ in 0..n {
            w.data_mut()[frame * k + tok] = T::one();
            frame += 1;
        }
    }
    w
}

/// Duration predictor: `V = swish(conv([H | z]))`, `d = softplus(V·w + b)`.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    pub conv: Conv1d,
    pub proj: Linear,
}

impl DurationPredictor {
    pub fn new(model_dim: usize, latent_dim: usize, width: usize) -> Result<Self> {
        Ok(DurationPredictor {
            conv: Conv1d::new("duration.conv", width, model_dim + latent_dim, model_dim)?,
            proj: Linear::new("duration.proj", model_dim, 1),
        })
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.proj.init(store, rng)
    }

    /// Returns `(V [K×M], d [K])`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        h: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let k = g.value(h).shape()[0];
        if k == 0 {
            return Err(Error::Empty("tokens"));
        }
        let x = g.concat_cols(h, z)?;
        let c = self.conv.forward(g, store, x)?;
        let v = g.swish(c);
        let p = self.proj.forward(g, store, v)?;
        let sp = g.softplus(p);
        let d = g.reshape(sp, vec![k])?;
        Ok((v, d))
    }
}

/// Tensor-level duration prediction.
pub fn predict_durations<T: Real>(
    predictor: &DurationPredictor,
    store: &ParameterStore<T>,
    h: &Tensor<T>,
    z: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new();
    let (hv, zv) = (g.input(h.clone()), g.input(z.clone()));
    let (v, d) = predictor.forward(&mut g, store, hv, zv)?;
    TokenSequence::new(g.value(v).clone(), g.value(d).clone())
}

/// Parameters of the learned upsampler.
///
/// One convolution over `V` (width 3, 8 channels, normalization, swish)
/// feeds two separate per-cell MLPs: the attention branch `10→16→16→1`
/// and the context branch `10→2→2`.
#[derive(Debug, Clone)]
pub struct UpsamplerParams {
    pub conv: Conv1d,
    pub norm: Norm,
    pub w_mlp: [Linear; 3],
    pub c_mlp: [Linear; 2],
    /// `P×M` projection of the reduced context.
    pub context_proj: String,
    pub model_dim: usize,
}

/// Graph handles produced by [`UpsamplerParams::forward`].
#[derive(Debug, Clone)]
pub struct UpsampleNodes<T> {
    pub s: Var,
    pub e: Var,
    pub grid_s: Var,
    pub grid_e: Var,
    pub w: Var,
    /// `(T·K)×P`.
    pub c: Var,
    pub a: Var,
    pub o: Var,
    pub norm_update: Option<NormUpdate<T>>,
}

impl UpsamplerParams {
    pub fn new(model_dim: usize, norm: NormKind, momentum: f64) -> Self {
        let h = ATTENTION_HIDDEN;
        let p = UpsamplerParams {
            conv: Conv1d::new("upsampler.conv", 3, model_dim, CONV_CHANNELS).expect("odd width"),
            norm: Norm::new("upsampler.norm", norm, CONV_CHANNELS, momentum),
            w_mlp: [
                Linear::new("upsampler.w_mlp.0", CELL_INPUT, h),
                Linear::new("upsampler.w_mlp.1", h, h),
                Linear::new("upsampler.w_mlp.2", h, 1),
            ],
            c_mlp: [
                Linear::new("upsampler.c_mlp.0", CELL_INPUT, CONTEXT_DIM),
                Linear::new("upsampler.c_mlp.1", CONTEXT_DIM, CONTEXT_DIM),
            ],
            context_proj: "upsampler.context_proj".into(),
            model_dim,
        };
        p.assert_layout();
        p
    }

    fn assert_layout(&self) {
        let w: Vec<_> = self.w_mlp.iter().map(|l| (l.input, l.output)).collect();
        let c: Vec<_> = self.c_mlp.iter().map(|l| (l.input, l.output)).collect();
        assert_eq!((self.conv.width, self.conv.output), (3, 8));
        assert_eq!(w, [(10, 16), (16, 16), (16, 1)]);
        assert_eq!(c, [(10, 2), (2, 2)]);
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.norm.init(store)?;
        for l in self.w_mlp.iter().chain(&self.c_mlp) {
            l.init(store, rng)?;
        }
        store.insert_glorot(
            &self.context_proj,
            &[CONTEXT_DIM, self.model_dim],
            CONTEXT_DIM,
            self.model_dim,
            rng,
        )
    }

    /// Names of every weight and bias of both MLPs.
    pub fn mlp_params(&self) -> Vec<&str> {
        self.w_mlp
            .iter()
            .chain(&self.c_mlp)
            .flat_map(|l| [l.weight.as_str(), l.bias.as_str()])
            .collect()
    }

    /// `[(T·K)×10]` per-cell MLP input.
    fn cell_input<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        grid_s: Var,
        grid_e: Var,
        v: Var,
        mode: Mode,
    ) -> Result<(Var, Option<NormUpdate<T>>)> {
        let c = self.conv.forward(g, store, v)?;
        let (n, upd) = self.norm.forward(g, store, c, mode)?;
        let f = g.swish(n);
        Ok((g.cell_features(grid_s, grid_e, f)?, upd))
    }

    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        t: usize,
        k: usize,
    ) -> Result<Var> {
        let h = self.w_mlp[0].forward(g, store, x)?;
        let h = g.swish(h);
        let h = self.w_mlp[1].forward(g, store, h)?;
        let h = g.swish(h);
        let logits = self.w_mlp[2].forward(g, store, h)?;
        let logits = g.reshape(logits, vec![t, k])?;
        g.softmax(logits, 1)
    }

    fn context<T: Real>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.c_mlp[0].forward(g, store, x)?;
        let h = g.swish(h);
        let h = self.c_mlp[1].forward(g, store, h)?;
        Ok(g.swish(h))
    }

    /// Full pass from `V` and `d` to `O` over `frames` output frames.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        v: Var,
        d: Var,
        frames: usize,
        mode: Mode,
    ) -> Result<UpsampleNodes<T>> {
        let k = g.value(d).len();
        if k == 0 {
            return Err(Error::Empty("tokens"));
        }
        if frames == 0 {
            return Err(Error::Empty("frames"));
        }
        let s = g.exclusive_cumsum(d)?;
        let e = g.add(s, d)?;
        let grid_s = g.frame_offset(s, frames, false)?;
        let grid_e = g.frame_offset(e, frames, true)?;
        let (x, norm_update) = self.cell_input(g, store, grid_s, grid_e, v, mode)?;
        let w = self.attention(g, store, x, frames, k)?;
        let c = self.context(g, store, x)?;
        let a = g.param(store, &self.context_proj)?;
        let o = upsample_node(g, w, v, c, a)?;
        Ok(UpsampleNodes {
            s,
            e,
            grid_s,
            grid_e,
            w,
            c,
            a,
            o,
            norm_update,
        })
    }

    /// Tensor-level pass returning every intermediate.
    pub fn align<T: Real>(
        &self,
        store: &ParameterStore<T>,
        seq: &TokenSequence<T>,
        frames: usize,
        mode: Mode,
    ) -> Result<AlignmentBundle<T>> {
        let mut g = Graph::new();
        let (v, d) = (g.input(seq.v.clone()), g.input(seq.d.clone()));
        let n = self.forward(&mut g, store, v, d, frames, mode)?;
        let k = seq.len();
        Ok(AlignmentBundle {
            s: g.value(n.s).clone(),
            e: g.value(n.e).clone(),
            grid_s: g.value(n.grid_s).clone(),
            grid_e: g.value(n.grid_e).clone(),
            w: g.value(n.w).clone(),
            c: g.value(n.c).clone().reshape(vec![frames, k, CONTEXT_DIM])?,
            a: g.value(n.a).clone(),
            o: g.value(n.o).clone(),
        })
    }

    /// Attention matrix `W` (`T×K`) from grids and token representations.
    pub fn attention_weights<T: Real>(
        &self,
        store: &ParameterStore<T>,
        grid_s: &Tensor<T>,
        grid_e: &Tensor<T>,
        v: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let (t, k) = grid_s.dims2("attention_weights")?;
        let mut g = Graph::new();
        let (gs, ge, vv) = (
            g.input(grid_s.clone()),
            g.input(grid_e.clone()),
            g.input(v.clone()),
        );
        let (x, _) = self.cell_input(&mut g, store, gs, ge, vv, mode)?;
        let w = self.attention(&mut g, store, x, t, k)?;
        Ok(g.value(w).clone())
    }

    /// Auxiliary context `C` (`T×K×P`).
    pub fn aux_context<T: Real>(
        &self,
        store: &ParameterStore<T>,
        grid_s: &Tensor<T>,
        grid_e: &Tensor<T>,
        v: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let (t, k) = grid_s.dims2("aux_context")?;
        let mut g = Graph::new();
        let (gs, ge, vv) = (
            g.input(grid_s.clone()),
            g.input(grid_e.clone()),
            g.input(v.clone()),
        );
        let (x, _) = self.cell_input(&mut g, store, gs, ge, vv, mode)?;
        let c = self.context(&mut g, store, x)?;
        g.value(c).clone().reshape(vec![t, k, CONTEXT_DIM])
    }
}

#[cfg(test)]
mod tests;
