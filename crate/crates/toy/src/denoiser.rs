//! Per-pixel residual denoiser with one cross-attention block.
//!
//! Every pixel `p` sees its 3×3 neighbourhood in `x_k`, a learned position
//! embedding and a learned step embedding. These give features `F_p` and a
//! query `q_p`. Each conditioning slot (one global, `M` local) has a key.
//! The local weights are a softmax over the `M` local slots at each pixel,
//! as in ordinary cross-attention over a prompt's tokens; the global weight
//! is a two-way softmax against a null token. All weights lie in `(0, 1)`.
//! A slot's output map is `a_p · v` with a softplus value vector:
//!
//! * local slot `m < #concepts` belongs to concept `m`: its key, and hence
//!   its attention map, exist in every example, but its value is zero when
//!   the concept is absent (an empty sub-prompt),
//! * remaining local slots are always-present background tokens,
//! * the global slot embeds the whole combination through a small MLP.
//!
//! Because every local map is computed in every example, the sparsity
//! penalty separates the concepts' maps even when no training image shows
//! two concepts together.
//!
//! Concept slots may carry a *layout prior*: a fixed logit offset of `+γ`
//! inside the concept's region and `−γ` outside. It plays the role of the
//! pretrained text–image alignment that makes a concept token attend to its
//! own region in a real model; the learned part of the logit can override
//! it. Without some such grounding, a support in which exactly one concept
//! is ever present cannot tell "this region follows concept 1" apart from
//! "this region follows the absence of concept 2".
//!
//! The maps are combined by the interpolation kernel (or the global map
//! alone), concatenated with `F_p`, passed through `F_p + tanh(·)`, and read
//! out linearly as a clean-pixel estimate `x̂_0(p)`. The predicted noise is
//! the fixed conversion `ε̂ = (x_k − √ᾱ_k x̂_0) / √(1 − ᾱ_k)`, which spares
//! the network from learning the step-dependent rescaling of `x_k`. The
//! local attention-weight maps `a^{(m)}` are the maps the sparsity penalty
//! acts on.

use hiercomp_core::kernels::{grad_sparsity_loss, interpolate_attention, sparsity_loss, AttentionMap, AttentionStack};
use hiercomp_core::sampler::NoiseSource;
use hiercomp_core::DiscreteCombination;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussians, Conditioning, NoisePredictor, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::error::{Result, ToyError};
use crate::scene::Region;

pub const MAX_PARAMETERS: usize = 100_000;
const PATCH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub grid: usize,
    pub concepts: usize,
    pub slots: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub pos_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub global_hidden: usize,
}

impl DenoiserShape {
    pub fn new(grid: usize, concepts: usize, slots: usize, steps: usize) -> Self {
        Self {
            grid,
            concepts,
            slots,
            steps,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            pos_dim: 8,
            time_dim: 8,
            hidden: 32,
            key_dim: 16,
            value_dim: 8,
            global_hidden: 16,
        }
    }

    pub fn with_betas(mut self, start: f64, end: f64) -> Self {
        self.beta_start = start;
        self.beta_end = end;
        self
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    fn input_dim(&self) -> usize {
        PATCH + self.pos_dim + self.time_dim
    }

    fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(ToyError::InvalidConfig("at least one local slot is required".into()));
        }
        if self.concepts == 0 || self.concepts > self.slots {
            return Err(ToyError::InvalidConfig(format!(
                "{} concepts do not fit into {} local slots",
                self.concepts, self.slots
            )));
        }
        if self.steps < 2 || self.grid < 2 {
            return Err(ToyError::InvalidConfig("need at least 2 steps and a 2×2 grid".into()));
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(Tensor, usize, usize)> {
        use Tensor::*;
        let (h, dk, dv, gh) = (self.hidden, self.key_dim, self.value_dim, self.global_hidden);
        vec![
            (Position, self.pixels(), self.pos_dim),
            (Time, self.steps, self.time_dim),
            (FeatureWeight, self.input_dim(), h),
            (FeatureBias, 1, h),
            (Query, h, dk),
            (LocalKeys, self.slots, dk),
            (LocalBias, 1, self.slots),
            (GlobalKey, 1, dk),
            (GlobalBias, 1, 1),
            (LocalValues, self.slots, dv),
            (GlobalWeight1, gh, 2 * self.concepts),
            (GlobalBias1, 1, gh),
            (GlobalWeight2, dv, gh),
            (GlobalBias2, 1, dv),
            (MixWeight, h + dv, h),
            (MixBias, 1, h),
            (OutWeight, h, 1),
            (OutBias, 1, 1),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tensor {
    Position,
    Time,
    FeatureWeight,
    FeatureBias,
    Query,
    LocalKeys,
    LocalBias,
    GlobalKey,
    GlobalBias,
    LocalValues,
    GlobalWeight1,
    GlobalBias1,
    GlobalWeight2,
    GlobalBias2,
    MixWeight,
    MixBias,
    OutWeight,
    OutBias,
}

impl Tensor {
    pub fn name(self) -> &'static str {
        use Tensor::*;
        match self {
            Position => "position",
            Time => "time",
            FeatureWeight => "feature.weight",
            FeatureBias => "feature.bias",
            Query => "query.weight",
            LocalKeys => "local.keys",
            LocalBias => "local.bias",
            GlobalKey => "global.key",
            GlobalBias => "global.bias",
            LocalValues => "local.values",
            GlobalWeight1 => "global.mlp1.weight",
            GlobalBias1 => "global.mlp1.bias",
            GlobalWeight2 => "global.mlp2.weight",
            GlobalBias2 => "global.mlp2.bias",
            MixWeight => "mix.weight",
            MixBias => "mix.bias",
            OutWeight => "out.weight",
            OutBias => "out.bias",
        }
    }
}

/// Name, shape and offset of one tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    rows: usize,
    cols: usize,
    offset: usize,
}

impl Slot {
    fn len(self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub shape: DenoiserShape,
    pub conditioning: Conditioning,
    params: Vec<f64>,
    slots: Vec<Slot>,
    schedule: NoiseSchedule,
    layout: Option<LayoutPrior>,
}

/// Region-per-concept logit offsets for the concept slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPrior {
    pub strength: f64,
    pub regions: Vec<Region>,
}

impl LayoutPrior {
    /// `pixels × slots` offsets; background slots get zero.
    fn offsets(&self, shape: &DenoiserShape) -> Array2<f64> {
        let mut out = Array2::zeros((shape.pixels(), shape.slots));
        for (m, reg) in self.regions.iter().enumerate().take(shape.slots) {
            for r in 0..shape.grid {
                for c in 0..shape.grid {
                    out[[r * shape.grid + c, m]] = if reg.contains(r, c) { self.strength } else { -self.strength };
                }
            }
        }
        out
    }
}

/// Forward intermediates for one image at one step.
#[derive(Debug, Clone)]
pub struct Forward {
    pub step: usize,
    inputs: Array2<f64>,
    features: Array2<f64>,
    queries: Array2<f64>,
    /// Local attention weights, `pixels × M`.
    pub local_weights: Array2<f64>,
    /// Global attention weights.
    pub global_weights: Array1<f64>,
    local_pre: Array2<f64>,
    local_values: Array2<f64>,
    /// 1 when the slot's value is active, 0 for an absent concept.
    gates: Array1<f64>,
    onehot: Array1<f64>,
    global_hidden: Array1<f64>,
    global_pre: Array1<f64>,
    global_values: Array1<f64>,
    /// Combined attention output fed to the mixing layer, `pixels × dv`.
    pub attention: Array2<f64>,
    mix: Array2<f64>,
    hidden: Array2<f64>,
    /// Clean-pixel estimate.
    pub x0: Array1<f64>,
    /// Predicted noise per pixel.
    pub output: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl ToyDenoiser {
    /// Fresh parameters drawn from the seed: weights `N(0, 1/fan_in)`,
    /// embeddings `N(0, 1/4)`, biases zero, a small read-out.
    pub fn new(shape: DenoiserShape, conditioning: Conditioning, seed: u64) -> Result<Self> {
        shape.validate()?;
        let schedule = NoiseSchedule::linear(shape.steps, shape.beta_start, shape.beta_end)?;
        let mut slots = Vec::new();
        let mut offset = 0;
        for (_, rows, cols) in shape.tensors() {
            slots.push(Slot { rows, cols, offset });
            offset += rows * cols;
        }
        if offset > MAX_PARAMETERS {
            return Err(ToyError::InvalidConfig(format!("{offset} parameters exceed the {MAX_PARAMETERS} budget")));
        }
        let mut params = vec![0.0; offset];
        NoiseSource::new(seed).uniforms(1 << 40, 0, &mut params);
        gaussians(&mut params);
        for (tensor, rows, _) in shape.tensors() {
            let slot = slots[tensor as usize];
            use Tensor::*;
            let scale = match tensor {
                Position | Time => 0.5,
                FeatureWeight | Query | MixWeight | GlobalWeight1 | GlobalWeight2 => 1.0 / (rows as f64).sqrt(),
                LocalKeys | GlobalKey => 1.0 / (shape.key_dim as f64).sqrt(),
                LocalValues => 0.5,
                OutWeight => 0.1 / (rows as f64).sqrt(),
                FeatureBias | LocalBias | GlobalBias | GlobalBias1 | GlobalBias2 | MixBias | OutBias => 0.0,
            };
            for v in &mut params[slot.offset..slot.offset + slot.len()] {
                *v *= scale;
            }
        }
        Ok(Self { shape, conditioning, params, slots, schedule, layout: None })
    }

    /// Rebuilds a denoiser from a flat parameter vector.
    pub fn from_parameters(shape: DenoiserShape, conditioning: Conditioning, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(shape, conditioning, 0)?;
        if params.len() != model.params.len() {
            return Err(ToyError::ShapeMismatch(format!(
                "{} parameters supplied, shape needs {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    /// Attaches a layout prior; one region per concept, strength ≥ 0.
    pub fn with_layout(mut self, prior: LayoutPrior) -> Result<Self> {
        if prior.regions.len() != self.shape.concepts || !(prior.strength >= 0.0 && prior.strength.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "layout prior needs {} regions and a finite non-negative strength",
                self.shape.concepts
            )));
        }
        if prior.regions.iter().any(|r| r.row + r.height > self.shape.grid || r.col + r.width > self.shape.grid) {
            return Err(ToyError::InvalidConfig("layout region leaves the grid".into()));
        }
        self.layout = Some(prior);
        Ok(self)
    }

    pub fn layout_prior(&self) -> Option<&LayoutPrior> {
        self.layout.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.shape
            .tensors()
            .iter()
            .map(|&(t, rows, cols)| TensorInfo {
                name: t.name().into(),
                rows,
                cols,
                offset: self.slots[t as usize].offset,
            })
            .collect()
    }

    fn view(&self, t: Tensor) -> ArrayView2<'_, f64> {
        let s = self.slots[t as usize];
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.offset..s.offset + s.len()])
            .expect("layout is consistent")
    }

    fn add_grad(&self, grad: &mut [f64], t: Tensor, g: ArrayView2<'_, f64>) {
        let s = self.slots[t as usize];
        debug_assert_eq!(g.dim(), (s.rows, s.cols));
        for (dst, src) in grad[s.offset..s.offset + s.len()].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    fn check_input(&self, xk: &[f64], d: &DiscreteCombination, step: usize) -> Result<()> {
        if xk.len() != self.shape.pixels() {
            return Err(ToyError::ShapeMismatch(format!(
                "image has {} pixels, expected {}",
                xk.len(),
                self.shape.pixels()
            )));
        }
        if d.len() != self.shape.concepts || d.values().iter().any(|&v| v > 1) {
            return Err(ToyError::ShapeMismatch(format!(
                "combination {d} does not match {} binary concepts",
                self.shape.concepts
            )));
        }
        if step >= self.shape.steps {
            return Err(ToyError::InvalidConfig(format!("step {step} outside 0..{}", self.shape.steps)));
        }
        Ok(())
    }

    fn input_matrix(&self, xk: &[f64], step: usize) -> Array2<f64> {
        let g = self.shape.grid;
        let pos = self.view(Tensor::Position);
        let time = self.view(Tensor::Time);
        let mut x = Array2::zeros((self.shape.pixels(), self.shape.input_dim()));
        for r in 0..g {
            for c in 0..g {
                let p = r * g + c;
                let mut j = 0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < g && (cc as usize) < g {
                            x[[p, j]] = xk[rr as usize * g + cc as usize];
                        }
                        j += 1;
                    }
                }
                x.slice_mut(s![p, PATCH..PATCH + self.shape.pos_dim]).assign(&pos.row(p));
                x.slice_mut(s![p, PATCH + self.shape.pos_dim..]).assign(&time.row(step));
            }
        }
        x
    }

    pub fn forward(&self, xk: &[f64], d: &DiscreteCombination, step: usize) -> Result<Forward> {
        self.check_input(xk, d, step)?;
        let sh = &self.shape;
        let inputs = self.input_matrix(xk, step);
        let mut features = inputs.dot(&self.view(Tensor::FeatureWeight)) + self.view(Tensor::FeatureBias).row(0);
        features.mapv_inplace(f64::tanh);
        let queries = features.dot(&self.view(Tensor::Query));

        let mut local_weights = queries.dot(&self.view(Tensor::LocalKeys).t()) + self.view(Tensor::LocalBias).row(0);
        if let Some(prior) = &self.layout {
            local_weights += &prior.offsets(sh);
        }
        for mut row in local_weights.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|l| (l - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let gk = self.view(Tensor::GlobalKey);
        let gb = self.view(Tensor::GlobalBias)[[0, 0]];
        let global_weights = queries.dot(&gk.row(0)).mapv(|l| sigmoid(l + gb));

        let values = self.view(Tensor::LocalValues);
        let gates: Array1<f64> =
            (0..sh.slots).map(|m| if m >= sh.concepts || d.values()[m] == 1 { 1.0 } else { 0.0 }).collect();
        let local_pre = values.to_owned();
        let local_values = local_pre.mapv(softplus) * gates.view().insert_axis(Axis(1));

        let mut onehot = Array1::zeros(2 * sh.concepts);
        for (i, &v) in d.values().iter().enumerate() {
            onehot[2 * i + v as usize] = 1.0;
        }
        let global_hidden =
            (self.view(Tensor::GlobalWeight1).dot(&onehot) + self.view(Tensor::GlobalBias1).row(0)).mapv(f64::tanh);
        let global_pre = self.view(Tensor::GlobalWeight2).dot(&global_hidden) + self.view(Tensor::GlobalBias2).row(0);
        let global_values = global_pre.mapv(softplus);

        let outer = |w: ndarray::ArrayView1<'_, f64>, v: &Array1<f64>| -> Array2<f64> {
            let col = w.insert_axis(Axis(1));
            &col * &v.view().insert_axis(Axis(0))
        };
        let global_map = outer(global_weights.view(), &global_values);
        let attention = match self.conditioning {
            Conditioning::GlobalOnly => global_map,
            Conditioning::Interpolated => {
                let locals = (0..sh.slots)
                    .map(|m| AttentionMap::new(outer(local_weights.column(m), &local_values.row(m).to_owned())))
                    .collect::<hiercomp_core::Result<Vec<_>>>()?;
                let stack = AttentionStack { global: AttentionMap::new(global_map)?, locals, t: step, total: sh.steps };
                interpolate_attention(&stack)?.into_inner()
            }
        };

        let mut joined = Array2::zeros((sh.pixels(), sh.hidden + sh.value_dim));
        joined.slice_mut(s![.., ..sh.hidden]).assign(&features);
        joined.slice_mut(s![.., sh.hidden..]).assign(&attention);
        let mut mix = joined.dot(&self.view(Tensor::MixWeight)) + self.view(Tensor::MixBias).row(0);
        mix.mapv_inplace(f64::tanh);
        let hidden = &features + &mix;
        let x0 = hidden.dot(&self.view(Tensor::OutWeight).column(0)) + self.view(Tensor::OutBias)[[0, 0]];
        let (a, b) = self.conversion(step);
        let output: Array1<f64> = xk.iter().zip(&x0).map(|(x, z)| (x - a * z) / b).collect();
        Ok(Forward {
            step,
            inputs,
            features,
            queries,
            local_weights,
            global_weights,
            local_pre,
            local_values,
            gates,
            onehot,
            global_hidden,
            global_pre,
            global_values,
            attention,
            mix,
            hidden,
            x0,
            output,
        })
    }

    /// `(√ᾱ_k, √(1 − ᾱ_k))` for step `k`.
    fn conversion(&self, step: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bars[step];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// The local attention-weight maps as `grid × grid` maps.
    pub fn local_maps(&self, fwd: &Forward) -> Result<Vec<AttentionMap>> {
        let g = self.shape.grid;
        (0..self.shape.slots)
            .map(|m| {
                let col = fwd.local_weights.column(m).to_owned();
                Ok(AttentionMap::new(
                    col.into_shape_with_order((g, g)).map_err(|e| ToyError::ShapeMismatch(e.to_string()))?,
                )?)
            })
            .collect()
    }

    /// Loss `L_d + λ·L_n` of one noised example and its gradient.
    ///
    /// `L_d` is the per-pixel mean squared noise error; `L_n` is the ordered
    /// pairwise DICE sum over the local attention-weight maps.
    pub fn loss_and_grad(
        &self,
        xk: &[f64],
        eps: &[f64],
        d: &DiscreteCombination,
        step: usize,
        lambda: f64,
    ) -> Result<ExampleGrad> {
        if eps.len() != xk.len() {
            return Err(ToyError::ShapeMismatch("noise and image sizes differ".into()));
        }
        let fwd = self.forward(xk, d, step)?;
        let maps = self.local_maps(&fwd)?;
        let l_n = sparsity_loss(&maps)?;
        let n = xk.len() as f64;
        let resid: Array1<f64> = fwd.output.iter().zip(eps).map(|(o, e)| o - e).collect();
        let l_d = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let d_out = resid.mapv(|r| 2.0 * r / n);
        let sparsity = if lambda > 0.0 { Some((lambda, grad_sparsity_loss(&maps)?)) } else { None };
        let grad = self.backward(&fwd, &d_out, sparsity)?;
        Ok(ExampleGrad { l_d, l_n, grad })
    }

    fn backward(
        &self,
        f: &Forward,
        d_out: &Array1<f64>,
        sparsity: Option<(f64, Vec<Array2<f64>>)>,
    ) -> Result<Vec<f64>> {
        use Tensor::*;
        let sh = &self.shape;
        let mut grad = vec![0.0; self.params.len()];
        let col = |v: &Array1<f64>| v.view().insert_axis(Axis(1)).to_owned();

        // Noise conversion, read-out and residual mixing layer.
        let (a, b) = self.conversion(f.step);
        let d_x0 = d_out * (-a / b);
        self.add_grad(&mut grad, OutWeight, f.hidden.t().dot(&d_x0).insert_axis(Axis(1)).view());
        self.add_grad(&mut grad, OutBias, Array2::from_elem((1, 1), d_x0.sum()).view());
        let d_hidden = col(&d_x0).dot(&self.view(OutWeight).t());
        let d_mix_pre = &d_hidden * &f.mix.mapv(|m| 1.0 - m * m);
        let mut joined = Array2::zeros((sh.pixels(), sh.hidden + sh.value_dim));
        joined.slice_mut(s![.., ..sh.hidden]).assign(&f.features);
        joined.slice_mut(s![.., sh.hidden..]).assign(&f.attention);
        self.add_grad(&mut grad, MixWeight, joined.t().dot(&d_mix_pre).view());
        self.add_grad(&mut grad, MixBias, d_mix_pre.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let d_joined = d_mix_pre.dot(&self.view(MixWeight).t());
        let mut d_features = d_hidden + d_joined.slice(s![.., ..sh.hidden]);
        let d_attention = d_joined.slice(s![.., sh.hidden..]).to_owned();

        // Split the attention gradient between the global and local maps.
        let (w_global, w_local) = match self.conditioning {
            Conditioning::GlobalOnly => (1.0, 0.0),
            Conditioning::Interpolated => {
                if f.step == sh.steps - 1 {
                    (1.0, 0.0)
                } else {
                    let s = hiercomp_core::kernels::schedule(f.step, sh.steps)?;
                    (1.0 - s, s / sh.slots as f64)
                }
            }
        };

        // Local slots.
        let mut d_local_w = d_attention.dot(&f.local_values.t()) * w_local;
        let d_local_values = f.local_weights.t().dot(&d_attention) * w_local;
        if let Some((lambda, grads)) = sparsity {
            for (m, g) in grads.iter().enumerate() {
                let mut c = d_local_w.column_mut(m);
                for (dst, src) in c.iter_mut().zip(g.iter()) {
                    *dst += lambda * src;
                }
            }
        }
        let inner = (&d_local_w * &f.local_weights).sum_axis(Axis(1));
        let d_local_logit = &f.local_weights * &(d_local_w - &inner.insert_axis(Axis(1)));
        let mut d_queries = d_local_logit.dot(&self.view(LocalKeys));
        self.add_grad(&mut grad, LocalKeys, d_local_logit.t().dot(&f.queries).view());
        self.add_grad(&mut grad, LocalBias, d_local_logit.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let d_values = d_local_values * &f.local_pre.mapv(sigmoid) * f.gates.view().insert_axis(Axis(1));
        self.add_grad(&mut grad, LocalValues, d_values.view());

        // Global slot.
        let d_global_map = d_attention * w_global;
        let d_global_w = d_global_map.dot(&f.global_values);
        let d_global_values = f.global_weights.dot(&d_global_map);
        let d_global_logit = &d_global_w * &f.global_weights.mapv(|a| a * (1.0 - a));
        let gk = self.view(GlobalKey).row(0).to_owned();
        d_queries += &(col(&d_global_logit).dot(&gk.view().insert_axis(Axis(0))));
        self.add_grad(&mut grad, GlobalKey, f.queries.t().dot(&d_global_logit).insert_axis(Axis(0)).view());
        self.add_grad(&mut grad, GlobalBias, Array2::from_elem((1, 1), d_global_logit.sum()).view());
        let d_z2 = &d_global_values * &f.global_pre.mapv(sigmoid);
        self.add_grad(&mut grad, GlobalWeight2, col(&d_z2).dot(&f.global_hidden.view().insert_axis(Axis(0))).view());
        self.add_grad(&mut grad, GlobalBias2, d_z2.view().insert_axis(Axis(0)));
        let d_h1 = self.view(GlobalWeight2).t().dot(&d_z2);
        let d_z1 = &d_h1 * &f.global_hidden.mapv(|h| 1.0 - h * h);
        self.add_grad(&mut grad, GlobalWeight1, col(&d_z1).dot(&f.onehot.view().insert_axis(Axis(0))).view());
        self.add_grad(&mut grad, GlobalBias1, d_z1.view().insert_axis(Axis(0)));

        // Query projection and feature layer.
        self.add_grad(&mut grad, Query, f.features.t().dot(&d_queries).view());
        d_features += &d_queries.dot(&self.view(Query).t());
        let d_feat_pre = &d_features * &f.features.mapv(|v| 1.0 - v * v);
        self.add_grad(&mut grad, FeatureWeight, f.inputs.t().dot(&d_feat_pre).view());
        self.add_grad(&mut grad, FeatureBias, d_feat_pre.sum_axis(Axis(0)).insert_axis(Axis(0)).view());
        let d_inputs = d_feat_pre.dot(&self.view(FeatureWeight).t());
        self.add_grad(&mut grad, Position, d_inputs.slice(s![.., PATCH..PATCH + sh.pos_dim]));
        let d_time = d_inputs.slice(s![.., PATCH + sh.pos_dim..]).sum_axis(Axis(0));
        let t = self.slots[Time as usize];
        for (j, v) in d_time.iter().enumerate() {
            grad[t.offset + f.step * t.cols + j] += v;
        }
        Ok(grad)
    }
}

/// Per-example loss terms and gradient.
#[derive(Debug, Clone)]
pub struct ExampleGrad {
    pub l_d: f64,
    pub l_n: f64,
    pub grad: Vec<f64>,
}

impl NoisePredictor for ToyDenoiser {
    fn predict(&self, xk: &[f64], d: &DiscreteCombination, step: usize) -> Result<Vec<f64>> {
        Ok(self.forward(xk, d, step)?.output.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dc(v: &[u32]) -> DiscreteCombination {
        DiscreteCombination::new(v.to_vec())
    }

    #[test]
    fn parameter_budget_and_layout() {
        let m = ToyDenoiser::new(DenoiserShape::new(16, 2, 3, 8), Conditioning::Interpolated, 0).unwrap();
        assert!(m.parameter_count() <= MAX_PARAMETERS);
        let layout = m.layout();
        let last = layout.last().unwrap();
        assert_eq!(last.offset + last.rows * last.cols, m.parameter_count());
        assert!(layout.windows(2).all(|w| w[0].offset + w[0].rows * w[0].cols == w[1].offset));
    }

    #[test]
    fn too_many_concepts_for_slots() {
        assert!(ToyDenoiser::new(DenoiserShape::new(8, 3, 2, 8), Conditioning::Interpolated, 0).is_err());
        assert!(ToyDenoiser::new(DenoiserShape::new(8, 1, 0, 8), Conditioning::Interpolated, 0).is_err());
    }

    #[test]
    fn attention_maps_are_non_negative() {
        let m = ToyDenoiser::new(DenoiserShape::new(8, 2, 3, 8), Conditioning::Interpolated, 1).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = m.forward(&x, &dc(&[1, 0]), 3).unwrap();
        assert!(f.local_weights.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(f.global_weights.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(f.attention.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn noisiest_step_uses_global_map_exactly() {
        let shape = DenoiserShape::new(8, 2, 3, 8);
        let td = ToyDenoiser::new(shape, Conditioning::Interpolated, 5).unwrap();
        let mut global = td.clone();
        global.conditioning = Conditioning::GlobalOnly;
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos()).collect();
        let a = td.forward(&x, &dc(&[1, 1]), 7).unwrap();
        let b = global.forward(&x, &dc(&[1, 1]), 7).unwrap();
        assert_eq!(a.attention, b.attention);
        assert_eq!(a.output, b.output);
        let c = td.forward(&x, &dc(&[1, 1]), 6).unwrap();
        assert_ne!(c.output, b.output);
    }

    #[test]
    fn global_only_ignores_local_slots() {
        let shape = DenoiserShape::new(8, 2, 3, 8);
        let m = ToyDenoiser::new(shape, Conditioning::GlobalOnly, 2).unwrap();
        let mut perturbed = m.clone();
        let off = m.slots[Tensor::LocalValues as usize].offset;
        perturbed.params[off] += 1.0;
        let x = vec![0.2; 64];
        for k in 0..8 {
            assert_eq!(m.predict(&x, &dc(&[0, 1]), k).unwrap(), perturbed.predict(&x, &dc(&[0, 1]), k).unwrap());
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = ToyDenoiser::new(DenoiserShape::new(8, 2, 3, 8), Conditioning::Interpolated, 0).unwrap();
        assert!(m.forward(&[0.0; 63], &dc(&[1, 0]), 0).is_err());
        assert!(m.forward(&[0.0; 64], &dc(&[1, 0, 1]), 0).is_err());
        assert!(m.forward(&[0.0; 64], &dc(&[1, 0]), 8).is_err());
        assert!(ToyDenoiser::from_parameters(m.shape, m.conditioning, vec![0.0; 3]).is_err());
    }

    fn fd_check(conditioning: Conditioning, step: usize, lambda: f64) -> f64 {
        let shape = DenoiserShape::new(6, 2, 3, 8);
        let mut m = ToyDenoiser::new(shape, conditioning, 9).unwrap();
        let x: Vec<f64> = (0..36).map(|i| (i as f64 * 0.7).sin()).collect();
        let eps: Vec<f64> = (0..36).map(|i| (i as f64 * 1.3).cos()).collect();
        let d = dc(&[1, 0]);
        let g = m.loss_and_grad(&x, &eps, &d, step, lambda).unwrap();
        let loss = |m: &ToyDenoiser| {
            let r = m.loss_and_grad(&x, &eps, &d, step, lambda).unwrap();
            r.l_d + lambda * r.l_n
        };
        let mut worst: f64 = 0.0;
        for i in (0..m.parameter_count()).step_by(7) {
            let h = 1e-5;
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = loss(&m);
            m.params[i] = orig - h;
            let down = loss(&m);
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g.grad[i]).abs() / fd.abs().max(g.grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (c, step) in [
            (Conditioning::Interpolated, 0),
            (Conditioning::Interpolated, 3),
            (Conditioning::Interpolated, 7),
            (Conditioning::GlobalOnly, 4),
        ] {
            let err = fd_check(c, step, 0.3);
            assert!(err <= 1e-4, "{c:?} step {step}: {err}");
        }
    }
}
