//! Sequence-to-sequence regressor: stacked LSTM encoder over the feature
//! matrix, stacked LSTM decoder fed its previous scalar prediction, cross
//! attention from each decoder output onto the encoder states, and an affine
//! head on `[o_t ; context]`.
//!
//! Batches are laid out time-major inside the recurrences (`row = t * N + b`)
//! and sample-major for attention memory (`row = b * L + t`).

use serde::{Deserialize, Serialize};
use spt_autograd::{Graph, Rng, Var};

use crate::error::{Result, SptError};
use crate::features::{input_vars, FeatureExtractor, PreparedSample};
use crate::params::{Bound, ParamId, ParamStore};

/// Samples per graph during inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub l_in: usize,
    pub l_out: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
    /// Single head on raw states, unscaled scores, no projections.
    pub paper_exact: bool,
    /// Off gives the 1D baseline: no image branch.
    pub gaf_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_in: 64,
            l_out: 64,
            hidden_size: 128,
            num_layers: 5,
            num_heads: 4,
            dropout: 0.1,
            paper_exact: false,
            gaf_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SptError::InvalidArgument(m));
        if self.l_in < 2 || self.l_out < 1 {
            return bad(format!(
                "sequence lengths must be l_in >= 2, l_out >= 1 (got {}, {})",
                self.l_in, self.l_out
            ));
        }
        if self.hidden_size == 0 || self.num_layers == 0 {
            return bad("hidden_size and num_layers must be positive".into());
        }
        if !self.paper_exact && (self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads)) {
            return bad(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn effective_heads(&self) -> usize {
        if self.paper_exact {
            1
        } else {
            self.num_heads
        }
    }
}

/// Inverted dropout drawing its masks from a borrowed stream.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.constant(&shape, mask)?;
        Ok(g.mul(x, mask)?)
    }
}

/// Dense layer `x W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => Ok(g.add_bias(y, p.get(b))?),
            None => Ok(y),
        }
    }
}

/// Hidden and cell state of one layer. `h == None` stands for the zero state.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub h: Option<Var>,
    pub c: Var,
}

impl LayerState {
    pub fn zeros(g: &mut Graph, n: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            h: None,
            c: g.constant(&[n, hidden], vec![0.0; n * hidden])?,
        })
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked LSTM. Gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
    input_size: usize,
    hidden_size: usize,
}

/// Encoder output: top-layer states, time-major `[L * N, H]`, and the final
/// state of every layer.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub h_seq: Var,
    pub final_state: Vec<LayerState>,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let fan = if l == 0 { input_size } else { hidden_size };
            layers.push(LstmLayer {
                w_ih: store.add_uniform(format!("{name}.l{l}.w_ih"), &[fan, 4 * hidden_size], hidden_size, rng)?,
                w_hh: store.add_uniform(
                    format!("{name}.l{l}.w_hh"),
                    &[hidden_size, 4 * hidden_size],
                    hidden_size,
                    rng,
                )?,
                b: store.add_zeros(format!("{name}.l{l}.bias"), &[4 * hidden_size])?,
            });
        }
        Ok(Self {
            layers,
            input_size,
            hidden_size,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn cell(&self, g: &mut Graph, p: &Bound, layer: &LstmLayer, xw: Var, state: LayerState) -> Result<LayerState> {
        let gates = match state.h {
            Some(h) => {
                let hw = g.matmul(h, p.get(layer.w_hh))?;
                g.add(xw, hw)?
            }
            None => xw,
        };
        let hc = g.lstm_cell(gates, state.c)?;
        let h = g.slice(hc, 1, 0, self.hidden_size)?;
        let c = g.slice(hc, 1, self.hidden_size, self.hidden_size)?;
        Ok(LayerState { h: Some(h), c })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_size {
            return Err(SptError::InvalidArgument(format!(
                "LSTM expects [rows, {}] input, got {shape:?}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Runs the stack over a time-major sequence `x: [len * n, input]` from
    /// zero initial states.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        n: usize,
        len: usize,
        dropout: &mut Dropout,
    ) -> Result<EncoderStates> {
        self.check_input(g, x)?;
        if g.shape(x)[0] != n * len {
            return Err(SptError::LengthMismatch {
                expected: n * len,
                actual: g.shape(x)[0],
            });
        }
        let mut input = x;
        let mut final_state = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                input = dropout.apply(g, input)?;
            }
            let xw = g.matmul(input, p.get(layer.w_ih))?;
            let xw = g.add_bias(xw, p.get(layer.b))?;
            let mut state = LayerState::zeros(g, n, self.hidden_size)?;
            let mut outs = Vec::with_capacity(len);
            for t in 0..len {
                let xt = g.slice(xw, 0, t * n, n)?;
                state = self.cell(g, p, layer, xt, state)?;
                outs.push(state.h.expect("cell sets h"));
            }
            final_state.push(state);
            input = g.concat(&outs, 0)?;
        }
        Ok(EncoderStates {
            h_seq: input,
            final_state,
        })
    }

    /// One step of every layer for `x: [n, input]`.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        state: &[LayerState],
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<LayerState>)> {
        self.check_input(g, x)?;
        if state.len() != self.layers.len() {
            return Err(SptError::LengthMismatch {
                expected: self.layers.len(),
                actual: state.len(),
            });
        }
        let rows = g.shape(x)[0];
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (l, (layer, &s)) in self.layers.iter().zip(state).enumerate() {
            if g.shape(s.c) != [rows, self.hidden_size] {
                return Err(SptError::InvalidArgument(format!(
                    "layer {l} state has shape {:?}, expected [{rows}, {}]",
                    g.shape(s.c),
                    self.hidden_size
                )));
            }
            if l > 0 {
                input = dropout.apply(g, input)?;
            }
            let xw = g.matmul(input, p.get(layer.w_ih))?;
            let xw = g.add_bias(xw, p.get(layer.b))?;
            let s = self.cell(g, p, layer, xw, s)?;
            input = s.h.expect("cell sets h");
            next.push(s);
        }
        Ok((input, next))
    }
}

#[derive(Debug, Clone)]
struct Projections {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

/// Cross attention from a decoder output onto the encoder states.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    heads: usize,
    hidden_size: usize,
    proj: Option<Projections>,
}

/// Keys and values for one encoded batch, sample-major `[N * L, H]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    keys: Var,
    values: Var,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        hidden_size: usize,
        heads: usize,
        paper_exact: bool,
    ) -> Result<Self> {
        if paper_exact {
            return Ok(Self {
                heads: 1,
                hidden_size,
                proj: None,
            });
        }
        if heads == 0 || !hidden_size.is_multiple_of(heads) {
            return Err(SptError::InvalidArgument(format!(
                "hidden_size {hidden_size} is not divisible by {heads} heads"
            )));
        }
        let h = hidden_size;
        let proj = Projections {
            q: Linear::new(store, rng, "attn.q", h, h, false)?,
            k: Linear::new(store, rng, "attn.k", h, h, false)?,
            v: Linear::new(store, rng, "attn.v", h, h, false)?,
            out: Linear::new(store, rng, "attn.out", h, h, true)?,
        };
        Ok(Self {
            heads,
            hidden_size,
            proj: Some(proj),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_paper_exact(&self) -> bool {
        self.proj.is_none()
    }

    fn scale(&self) -> f64 {
        match self.proj {
            Some(_) => 1.0 / ((self.hidden_size / self.heads) as f64).sqrt(),
            None => 1.0,
        }
    }

    /// Projects sample-major encoder states once per batch.
    pub fn memory(&self, g: &mut Graph, p: &Bound, h_seq: Var) -> Result<AttentionMemory> {
        match &self.proj {
            Some(proj) => Ok(AttentionMemory {
                keys: proj.k.forward(g, p, h_seq)?,
                values: proj.v.forward(g, p, h_seq)?,
            }),
            None => Ok(AttentionMemory {
                keys: h_seq,
                values: h_seq,
            }),
        }
    }

    /// Returns the context `[N, H]` and the head-averaged weights `[N * L]`.
    pub fn attend(&self, g: &mut Graph, p: &Bound, o_t: Var, mem: AttentionMemory) -> Result<(Var, Vec<f64>)> {
        let q = match &self.proj {
            Some(proj) => proj.q.forward(g, p, o_t)?,
            None => o_t,
        };
        let ctx = g.attention(q, mem.keys, mem.values, self.heads, self.scale())?;
        let probs = g.attention_probs(ctx).expect("attention node keeps its weights");
        let n = g.shape(o_t)[0];
        let len = probs.len() / (n * self.heads);
        let mut alpha = vec![0.0; n * len];
        for b in 0..n {
            for h in 0..self.heads {
                let row = &probs[(b * self.heads + h) * len..][..len];
                for (a, &w) in alpha[b * len..(b + 1) * len].iter_mut().zip(row) {
                    *a += w;
                }
            }
        }
        let inv = 1.0 / self.heads as f64;
        alpha.iter_mut().for_each(|a| *a *= inv);
        let ctx = match &self.proj {
            Some(proj) => proj.out.forward(g, p, ctx)?,
            None => ctx,
        };
        Ok((ctx, alpha))
    }
}

/// How a forward pass treats targets and randomness.
pub enum Mode<'a> {
    /// Fully autoregressive, no dropout, targets ignored.
    Inference,
    /// Dropout on, and each sample's next decoder input is its ground truth
    /// with probability `teacher_forcing_ratio` per step.
    Training {
        rng: &'a mut Rng,
        teacher_forcing_ratio: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Normalized predictions `[N, L_out]`.
    pub predictions: Var,
    /// Per decoder step, head-averaged weights `[N * L_in]`.
    pub alpha: Vec<Vec<f64>>,
    /// Per decoder step, the scalar fed to each sample's decoder.
    pub decoder_inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamStore,
    features: FeatureExtractor,
    encoder: LstmStack,
    lift: Linear,
    decoder: LstmStack,
    attention: CrossAttention,
    head: Linear,
}

impl Seq2Seq {
    /// Draws every weight from `rng`; biases start at zero.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut params = ParamStore::new();
        let features = FeatureExtractor::new(&mut params, rng, config.gaf_enabled)?;
        let encoder = LstmStack::new(&mut params, rng, "encoder", features.channels(), h, config.num_layers)?;
        let lift = Linear::new(&mut params, rng, "decoder.lift", 1, h, true)?;
        let decoder = LstmStack::new(&mut params, rng, "decoder", h, h, config.num_layers)?;
        let attention = CrossAttention::new(&mut params, rng, h, config.num_heads, config.paper_exact)?;
        let head = Linear::new(&mut params, rng, "head", 2 * h, 1, true)?;
        Ok(Self {
            config,
            params,
            features,
            encoder,
            lift,
            decoder,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    pub fn encoder(&self) -> &LstmStack {
        &self.encoder
    }

    pub fn decoder(&self) -> &LstmStack {
        &self.decoder
    }

    pub fn attention(&self) -> &CrossAttention {
        &self.attention
    }

    /// Encodes a time-major feature sequence `[len * n, C]`.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        n: usize,
        len: usize,
        dropout: &mut Dropout,
    ) -> Result<EncoderStates> {
        self.encoder.forward_sequence(g, p, x, n, len, dropout)
    }

    /// Lifts `prev_y: [N, 1]` to the hidden width and advances the decoder.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev_y: Var,
        state: &[LayerState],
        dropout: &mut Dropout,
    ) -> Result<(Var, Vec<LayerState>)> {
        let x = self.lift.forward(g, p, prev_y)?;
        self.decoder.step(g, p, x, state, dropout)
    }

    /// Affine map of `[o_t ; context]` to one normalized stress per row.
    pub fn predict_head(&self, g: &mut Graph, p: &Bound, o_t: Var, context: Var) -> Result<Var> {
        let x = g.concat(&[o_t, context], 1)?;
        self.head.forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, samples: &[&PreparedSample], mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if samples.is_empty() {
            return Err(SptError::InvalidArgument("empty batch".into()));
        }
        let (mut rng, ratio) = match mode {
            Mode::Inference => (None, 0.0),
            Mode::Training {
                rng,
                teacher_forcing_ratio,
            } => {
                if !(0.0..=1.0).contains(&teacher_forcing_ratio) {
                    return Err(SptError::InvalidArgument(format!(
                        "teacher forcing ratio must lie in [0, 1], got {teacher_forcing_ratio}"
                    )));
                }
                (Some(rng), teacher_forcing_ratio)
            }
        };
        let n = samples.len();
        for s in samples {
            if s.len() != cfg.l_in {
                return Err(SptError::LengthMismatch {
                    expected: cfg.l_in,
                    actual: s.len(),
                });
            }
            if rng.is_some() && s.target.len() != cfg.l_out {
                return Err(SptError::LengthMismatch {
                    expected: cfg.l_out,
                    actual: s.target.len(),
                });
            }
        }
        let l_in = cfg.l_in;

        let inputs = input_vars(g, samples, cfg.gaf_enabled)?;
        let m = self
            .features
            .feature_matrix(g, p, inputs.raw, inputs.load, inputs.image)?;
        let c = self.features.channels();
        let m = g.reshape(m, &[n * l_in, c])?;
        let to_time_major: Vec<usize> = (0..l_in).flat_map(|t| (0..n).map(move |b| b * l_in + t)).collect();
        let x = g.gather_rows(m, &to_time_major)?;

        let mut dropout = match rng.as_deref_mut() {
            Some(r) => Dropout::new(cfg.dropout, r),
            None => Dropout::disabled(),
        };
        let enc = self.encoder.forward_sequence(g, p, x, n, l_in, &mut dropout)?;
        let to_sample_major: Vec<usize> = (0..n).flat_map(|b| (0..l_in).map(move |t| t * n + b)).collect();
        let h_sm = g.gather_rows(enc.h_seq, &to_sample_major)?;
        let mem = self.attention.memory(g, p, h_sm)?;

        let mut state = enc.final_state;
        let mut prev = g.constant(&[n, 1], vec![0.0; n])?;
        let mut preds = Vec::with_capacity(cfg.l_out);
        let mut alpha = Vec::with_capacity(cfg.l_out);
        let mut decoder_inputs = Vec::with_capacity(cfg.l_out);
        for t in 0..cfg.l_out {
            decoder_inputs.push(g.value(prev).to_vec());
            let mut dropout = match rng.as_deref_mut() {
                Some(r) => Dropout::new(cfg.dropout, r),
                None => Dropout::disabled(),
            };
            let (o_t, next) = self.decoder_step(g, p, prev, &state, &mut dropout)?;
            state = next;
            let (ctx, a) = self.attention.attend(g, p, o_t, mem)?;
            alpha.push(a);
            let y = self.predict_head(g, p, o_t, ctx)?;
            preds.push(y);
            if t + 1 == cfg.l_out {
                break;
            }
            prev = match rng.as_deref_mut() {
                Some(r) if ratio > 0.0 => {
                    let forced: Vec<bool> = (0..n).map(|_| r.bernoulli(ratio)).collect();
                    self.mix_teacher(g, y, samples, t, &forced)?
                }
                _ => y,
            };
        }
        let predictions = g.concat(&preds, 1)?;
        Ok(ForwardOutput {
            predictions,
            alpha,
            decoder_inputs,
        })
    }

    /// `y` where not forced, the step-`t` target where forced.
    fn mix_teacher(
        &self,
        g: &mut Graph,
        y: Var,
        samples: &[&PreparedSample],
        t: usize,
        forced: &[bool],
    ) -> Result<Var> {
        let n = samples.len();
        let truth: Vec<f64> = samples.iter().map(|s| s.target[t]).collect();
        if forced.iter().all(|&f| f) {
            return Ok(g.constant(&[n, 1], truth)?);
        }
        if !forced.iter().any(|&f| f) {
            return Ok(y);
        }
        let keep: Vec<f64> = forced.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect();
        let fill: Vec<f64> = forced
            .iter()
            .zip(&truth)
            .map(|(&f, &v)| if f { v } else { 0.0 })
            .collect();
        let keep = g.constant(&[n, 1], keep)?;
        let fill = g.constant(&[n, 1], fill)?;
        let kept = g.mul(y, keep)?;
        Ok(g.add(kept, fill)?)
    }

    /// Autoregressive normalized predictions, one row per sample.
    pub fn predict(&self, samples: &[PreparedSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let refs: Vec<&PreparedSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let fwd = self.forward(&mut g, &p, &refs, Mode::Inference)?;
            out.extend(g.value(fwd.predictions).chunks(self.config.l_out).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}
