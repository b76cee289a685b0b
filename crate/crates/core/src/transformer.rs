//! Encoder–decoder with masked multi-head attention and the intensity, hazard
//! and longitudinal heads.
//!
//! Each layer is post-norm: attention, dropout, residual, layer norm, then a
//! ReLU feed-forward with the same dropout/residual/norm wrapping. Decoder
//! layers run causal self-attention among the prediction tokens of one query
//! group, then cross-attention to the encoded history.
//!
//! Dot products are divided by `√d_head` unless `scale_dot_products` is off.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, AttentionPattern, RowEmbed, Scalar, Tape, Var};
use crate::data::{ConcurrentOrder, PatientRecord, TokenKind};
use crate::embedding::{row_for, EmbedRow, Embedder, PredKind};
use crate::error::{LsrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Longitudinal dimensions.
    pub m: usize,
    /// Baseline covariates.
    pub p: usize,
    pub d_time: usize,
    pub d_type: usize,
    pub d_base: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub scale_dot_products: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 3,
            p: 3,
            d_time: 16,
            d_type: 32,
            d_base: 16,
            n_heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 3,
            dropout: 0.2,
            scale_dot_products: true,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.d_time + self.d_type + self.d_base
    }

    /// Tiny configuration used for finite-difference gradient checks.
    pub fn micro(m: usize, p: usize) -> Self {
        Self {
            m,
            p,
            d_time: 2,
            d_type: 4,
            d_base: 2,
            n_heads: 1,
            d_ff: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            scale_dot_products: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(LsrError::config("m", "must be positive"));
        }
        if self.d_time == 0 || !self.d_time.is_multiple_of(2) {
            return Err(LsrError::config("d_time", "must be positive and even"));
        }
        if self.d_type == 0 || self.d_base == 0 {
            return Err(LsrError::config("d_type/d_base", "must be positive"));
        }
        if self.n_heads == 0 || !self.d_model().is_multiple_of(self.n_heads) {
            return Err(LsrError::config(
                "n_heads",
                format!("d_model = {} is not divisible by {}", self.d_model(), self.n_heads),
            ));
        }
        if self.d_ff == 0 {
            return Err(LsrError::config("d_ff", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LsrError::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn attention_scale(&self) -> f64 {
        if self.scale_dot_products {
            1.0 / ((self.d_model() / self.n_heads) as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedIds {
    pub cov_w: usize,
    pub cov_b: usize,
    pub val_w: usize,
    pub val_b: usize,
    pub pred: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub ff: FeedForwardIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub norm1: NormIds,
    pub cross_attn: AttnIds,
    pub norm2: NormIds,
    pub ff: FeedForwardIds,
    pub norm3: NormIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadIds {
    pub lambda_w: usize,
    pub lambda_b: usize,
    pub hazard_w: usize,
    pub hazard_b: usize,
    /// Column `u` holds `W_{Y_u}`.
    pub y_w: usize,
    pub y_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with fan-in given.
    Uniform(usize),
    Ones,
    Zeros,
}

/// Names, shapes and initialisers of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    pub embed: EmbedIds,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub heads: HeadIds,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn affine(&mut self, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let wi = self.add(format!("{prefix}.{w}"), (fan_in, fan_out), Init::Uniform(fan_in));
        let bi = self.add(format!("{prefix}.{b}"), (1, fan_out), Init::Uniform(fan_in));
        (wi, bi)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let (wq, bq) = self.affine(prefix, "wq", "bq", d, d);
        let (wk, bk) = self.affine(prefix, "wk", "bk", d, d);
        let (wv, bv) = self.affine(prefix, "wv", "bv", d, d);
        AttnIds { wq, bq, wk, bk, wv, bv }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForwardIds {
        let (w1, b1) = self.affine(prefix, "w1", "b1", d, d_ff);
        let (w2, b2) = self.affine(prefix, "w2", "b2", d_ff, d);
        FeedForwardIds { w1, b1, w2, b2 }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model();
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let (cov_w, cov_b) = b.affine("embed.covariates", "w", "b", cfg.p.max(1), cfg.d_base);
        let val_w = b.add("embed.value.w".into(), (cfg.m, cfg.d_type), Init::Uniform(1));
        let val_b = b.add("embed.value.b".into(), (cfg.m, cfg.d_type), Init::Uniform(1));
        let pred = b.add("embed.prediction".into(), (PredKind::count(cfg.m), cfg.d_type), Init::Uniform(1));
        let embed = EmbedIds { cov_w, cov_b, val_w, val_b, pred };
        if cfg.p == 0 {
            b.shapes[cov_w] = (0, cfg.d_base);
        }
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let pre = format!("encoder.{l}");
                EncoderLayerIds {
                    attn: b.attn(&format!("{pre}.attn"), d),
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    ff: b.ff(&format!("{pre}.ff"), d, cfg.d_ff),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                }
            })
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let pre = format!("decoder.{l}");
                DecoderLayerIds {
                    self_attn: b.attn(&format!("{pre}.self_attn"), d),
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    cross_attn: b.attn(&format!("{pre}.cross_attn"), d),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                    ff: b.ff(&format!("{pre}.ff"), d, cfg.d_ff),
                    norm3: b.norm(&format!("{pre}.norm3"), d),
                }
            })
            .collect();
        let (lambda_w, lambda_b) = b.affine("head.intensity", "w", "b", d, 1);
        let (hazard_w, hazard_b) = b.affine("head.hazard", "w", "b", d, 1);
        let (y_w, y_b) = b.affine("head.longitudinal", "w", "b", d, cfg.m);
        ParamLayout {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            embed,
            encoder,
            decoder,
            heads: HeadIds {
                lambda_w,
                lambda_b,
                hazard_w,
                hazard_b,
                y_w,
                y_b,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Data-derived settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub order: ConcurrentOrder,
    /// 99th percentile of training inter-visit gaps (rollout horizon).
    pub gap_q99: Option<f64>,
}

/// All learnable weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub tensors: Vec<Array2<f64>>,
    pub meta: ModelMeta,
}

/// Tape handles of every parameter for one forward pass.
pub struct ParamVars<'a> {
    pub ids: &'a ParamLayout,
    vars: Vec<Var>,
}

impl ParamVars<'_> {
    pub fn get(&self, id: usize) -> Var {
        self.vars[id]
    }
}

impl ModelParameters {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = ParamLayout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(&shape, &init)| match init {
                Init::Ones => Array2::ones(shape),
                Init::Zeros => Array2::zeros(shape),
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a);
                    Array2::from_shape_simple_fn(shape, || rng.sample(dist))
                }
            })
            .collect();
        Self {
            config: cfg.clone(),
            layout,
            tensors,
            meta: ModelMeta {
                order: ConcurrentOrder::identity(cfg.m),
                gap_q99: None,
            },
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn register<'a>(&'a self, tape: &mut Tape) -> ParamVars<'a> {
        let vars = self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
        ParamVars { ids: &self.layout, vars }
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.layout.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .layout
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &ckpt)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(ckpt)
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(LsrError::config("version", format!("unsupported checkpoint version {}", ckpt.version)));
        }
        ckpt.config.validate()?;
        let layout = ParamLayout::new(&ckpt.config);
        if ckpt.tensors.len() != layout.len() {
            return Err(LsrError::Shape {
                name: "tensors".into(),
                expected: vec![layout.len()],
                actual: vec![ckpt.tensors.len()],
            });
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (i, nt) in ckpt.tensors.into_iter().enumerate() {
            let want = layout.shapes[i];
            if nt.name != layout.names[i] || nt.shape != [want.0, want.1] || nt.data.len() != want.0 * want.1 {
                return Err(LsrError::Shape {
                    name: nt.name,
                    expected: vec![want.0, want.1],
                    actual: nt.shape.to_vec(),
                });
            }
            tensors.push(Array2::from_shape_vec(want, nt.data).expect("checked length"));
        }
        Ok(Self {
            config: ckpt.config,
            layout,
            tensors,
            meta: ckpt.meta,
        })
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<NamedTensor>,
}

/// One group of decoder tokens sharing a prediction time and a history.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGroup {
    pub time: f64,
    /// Number of history visits visible through cross-attention.
    pub history: usize,
    pub tokens: Vec<DecoderToken>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoderToken {
    Predict(PredKind),
    /// A fed-back value for longitudinal dimension `dim`.
    Value { dim: usize, value: Scalar },
}

/// Output of the encoder over a (possibly empty) token sequence.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub out: Var,
    pub observed: Vec<bool>,
    pub tokens_per_visit: usize,
}

/// A query for the decoder: rates at `time` given the first `history`
/// visits, plus the autoregressive longitudinal forecast when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub time: f64,
    pub history: usize,
    pub longitudinal: bool,
    /// Values to feed back instead of the model's own forecast, by order
    /// position.
    pub overrides: Vec<Option<f64>>,
}

impl Query {
    pub fn rates(time: f64, history: usize) -> Self {
        Self {
            time,
            history,
            longitudinal: false,
            overrides: Vec::new(),
        }
    }

    pub fn full(time: f64, history: usize) -> Self {
        Self {
            time,
            history,
            longitudinal: true,
            overrides: Vec::new(),
        }
    }
}

/// Head outputs for a batch of queries.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// `n_queries x 1`.
    pub intensity: Var,
    /// `n_queries x 1`.
    pub hazard: Var,
    /// Per order position `k`, a column over longitudinal queries (in query
    /// order) holding `Ŷ_{σ(k)}`.
    pub longitudinal: Vec<Var>,
    /// Index of each query among the longitudinal queries.
    pub long_index: Vec<Option<usize>>,
}

/// One forward pass over a single patient, recorded on a tape.
pub struct ModelRun<'p> {
    pub params: &'p ModelParameters,
    pub tape: Tape,
    vars: ParamVars<'p>,
    embedder: Embedder,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> ModelRun<'p> {
    /// Starts a pass. With `dropout_seed` set, dropout is active at the
    /// configured rate.
    pub fn new(params: &'p ModelParameters, covariates: &[f64], dropout_seed: Option<u64>) -> Self {
        Self::with_dropout(params, covariates, dropout_seed.map(|s| (params.config.dropout, s)))
    }

    /// Starts a pass with an explicit dropout rate.
    pub fn with_dropout(params: &'p ModelParameters, covariates: &[f64], dropout: Option<(f64, u64)>) -> Self {
        let mut tape = Tape::new();
        // Registering a parameter clones it onto the tape; the borrow of
        // `params` outlives the tape so ids stay valid.
        let vars = params.register(&mut tape);
        let embedder = Embedder::new(&mut tape, &vars, covariates);
        let dropout = dropout
            .filter(|&(rate, _)| rate > 0.0)
            .map(|(rate, seed)| (rate, ChaCha8Rng::seed_from_u64(seed)));
        Self {
            params,
            tape,
            vars,
            embedder,
            dropout,
        }
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn maybe_dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else { return x };
        let keep = 1.0 - *rate;
        let shape = self.tape.value(x).dim();
        let mask = Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        self.tape.dropout(x, mask)
    }

    fn attention(&mut self, xq: Var, xkv: Var, ids: &AttnIds, pattern: Rc<AttentionPattern>) -> Var {
        let v = &self.vars;
        let (wq, bq, wk, bk, wv, bv) = (v.get(ids.wq), v.get(ids.bq), v.get(ids.wk), v.get(ids.bk), v.get(ids.wv), v.get(ids.bv));
        let q = self.tape.affine(xq, wq, bq);
        let k = self.tape.affine(xkv, wk, bk);
        let val = self.tape.affine(xkv, wv, bv);
        let heads = self.cfg().n_heads;
        let scale = self.cfg().attention_scale();
        self.tape.attention(q, k, val, pattern, heads, scale)
    }

    fn residual_norm(&mut self, x: Var, update: Var, ids: &NormIds) -> Var {
        let dropped = self.maybe_dropout(update);
        let sum = self.tape.add(x, dropped);
        let (g, b) = (self.vars.get(ids.gain), self.vars.get(ids.bias));
        self.tape.layer_norm(sum, g, b)
    }

    fn feed_forward(&mut self, x: Var, ids: &FeedForwardIds) -> Var {
        let v = &self.vars;
        let (w1, b1, w2, b2) = (v.get(ids.w1), v.get(ids.b1), v.get(ids.w2), v.get(ids.b2));
        let h = self.tape.affine(x, w1, b1);
        let h = self.tape.relu(h);
        self.tape.affine(h, w2, b2)
    }

    /// One encoder layer: masked self-attention then feed-forward.
    pub fn encoder_layer(&mut self, x: Var, layer: usize, pattern: Rc<AttentionPattern>) -> Var {
        let ids = self.params.layout.encoder[layer].clone();
        let a = self.attention(x, x, &ids.attn, pattern);
        let h = self.residual_norm(x, a, &ids.norm1);
        let f = self.feed_forward(h, &ids.ff);
        self.residual_norm(h, f, &ids.norm2)
    }

    /// One decoder layer: causal self-attention within groups, then
    /// cross-attention to the encoder output, then feed-forward.
    pub fn decoder_layer(
        &mut self,
        y: Var,
        enc: Var,
        layer: usize,
        self_pattern: Rc<AttentionPattern>,
        cross_pattern: Rc<AttentionPattern>,
    ) -> Var {
        let ids = self.params.layout.decoder[layer].clone();
        let a = self.attention(y, y, &ids.self_attn, self_pattern);
        let h1 = self.residual_norm(y, a, &ids.norm1);
        let c = self.attention(h1, enc, &ids.cross_attn, cross_pattern);
        let h2 = self.residual_norm(h1, c, &ids.norm2);
        let f = self.feed_forward(h2, &ids.ff);
        self.residual_norm(h2, f, &ids.norm3)
    }

    /// Runs the encoder stack over already-embedded tokens.
    pub fn encode_embedded(&mut self, x: Var, observed: &[bool]) -> Var {
        let pattern = Rc::new(encoder_pattern(observed));
        let mut h = x;
        for layer in 0..self.cfg().encoder_layers {
            h = self.encoder_layer(h, layer, pattern.clone());
        }
        h
    }

    /// Embeds and encodes the first `n_visits` visits of `record`.
    pub fn encode(&mut self, record: &PatientRecord, n_visits: usize) -> Result<Encoded> {
        let order = self.params.meta.order.clone();
        let m = self.cfg().m;
        let d_time = self.cfg().d_time;
        let mut rows = Vec::with_capacity(m * n_visits);
        let mut observed = Vec::with_capacity(m * n_visits);
        for (t, obs) in record.visit_times()[..n_visits].iter().zip(&record.observations()[..n_visits]) {
            for &u in order.as_slice() {
                let v = obs.get(u);
                rows.push(row_for(TokenKind::Longitudinal(u), *t, v.unwrap_or(0.0), false, m)?);
                observed.push(v.is_some());
            }
        }
        let out = if rows.is_empty() {
            self.tape.constant(Array2::zeros((0, self.cfg().d_model())))
        } else {
            let x = self.embedder.embed(&mut self.tape, &self.vars, d_time, &rows);
            self.encode_embedded(x, &observed)
        };
        Ok(Encoded {
            out,
            observed,
            tokens_per_visit: m,
        })
    }

    /// Embeds decoder groups (rows concatenated group after group).
    pub fn embed_groups(&mut self, groups: &[DecoderGroup]) -> Var {
        let d_time = self.cfg().d_time;
        let rows: Vec<EmbedRow> = groups
            .iter()
            .flat_map(|g| {
                g.tokens.iter().map(move |tok| match *tok {
                    DecoderToken::Predict(kind) => EmbedRow {
                        time: g.time,
                        kind: RowEmbed::Prediction(kind.index()),
                        value: Scalar::Const(0.0),
                    },
                    DecoderToken::Value { dim, value } => EmbedRow {
                        time: g.time,
                        kind: RowEmbed::Value(dim),
                        value,
                    },
                })
            })
            .collect();
        self.embedder.embed(&mut self.tape, &self.vars, d_time, &rows)
    }

    /// Runs the decoder stack over embedded group tokens.
    pub fn decode_embedded(&mut self, y: Var, enc: &Encoded, groups: &[DecoderGroup]) -> Var {
        let (self_pattern, cross_pattern) = decoder_patterns(groups, enc);
        let (sp, cp) = (Rc::new(self_pattern), Rc::new(cross_pattern));
        let mut h = y;
        for layer in 0..self.cfg().decoder_layers {
            h = self.decoder_layer(h, enc.out, layer, sp.clone(), cp.clone());
        }
        h
    }

    pub fn decode(&mut self, enc: &Encoded, groups: &[DecoderGroup]) -> Var {
        let y = self.embed_groups(groups);
        self.decode_embedded(y, enc, groups)
    }

    /// `softplus(Φ W + a)` on the selected rows of the decoder output.
    pub fn rate_head(&mut self, dec: Var, rows: Vec<usize>, kind: PredKind) -> Var {
        let h = &self.params.layout.heads;
        let (w, b) = match kind {
            PredKind::Hazard => (h.hazard_w, h.hazard_b),
            _ => (h.lambda_w, h.lambda_b),
        };
        let (w, b) = (self.vars.get(w), self.vars.get(b));
        let phi = self.tape.gather_rows(dec, rows);
        let z = self.tape.affine(phi, w, b);
        self.tape.softplus(z)
    }

    /// `Φ W_{Y_u} + a_{Y_u}` for `(row, u)` pairs, as a column.
    pub fn longitudinal_head(&mut self, dec: Var, rows: &[(usize, usize)]) -> Var {
        let h = &self.params.layout.heads;
        let (w, b) = (self.vars.get(h.y_w), self.vars.get(h.y_b));
        let phi = self.tape.gather_rows(dec, rows.iter().map(|r| r.0).collect());
        let all = self.tape.affine(phi, w, b);
        self.tape.gather_elems(all, rows.iter().enumerate().map(|(i, r)| (i, r.1)).collect())
    }

    /// Evaluates queries. Rates come from groups `[λ, h]`; longitudinal
    /// forecasts are decoded autoregressively in the concurrent order, each
    /// forecast replacing its prediction token before the next dimension is
    /// decoded.
    pub fn predict(&mut self, enc: &Encoded, queries: &[Query]) -> Predictions {
        let order = self.params.meta.order.clone();
        let m = order.len();
        let mut long_index = Vec::with_capacity(queries.len());
        let mut n_long = 0;
        for q in queries {
            long_index.push(q.longitudinal.then(|| {
                n_long += 1;
                n_long - 1
            }));
        }

        // first pass: rates for every query, first longitudinal dimension
        let groups: Vec<DecoderGroup> = queries
            .iter()
            .map(|q| {
                let mut tokens = vec![DecoderToken::Predict(PredKind::Intensity), DecoderToken::Predict(PredKind::Hazard)];
                if q.longitudinal {
                    tokens.push(DecoderToken::Predict(PredKind::Longitudinal(order.dim_at(0))));
                }
                DecoderGroup {
                    time: q.time,
                    history: q.history,
                    tokens,
                }
            })
            .collect();
        let offsets = group_offsets(&groups);
        let dec = self.decode(enc, &groups);
        let intensity = self.rate_head(dec, offsets.to_vec(), PredKind::Intensity);
        let hazard = self.rate_head(dec, offsets.iter().map(|&o| o + 1).collect(), PredKind::Hazard);
        let mut longitudinal = Vec::with_capacity(m);
        if n_long == 0 {
            return Predictions {
                intensity,
                hazard,
                longitudinal,
                long_index,
            };
        }
        let rows: Vec<(usize, usize)> = queries
            .iter()
            .zip(&offsets)
            .filter(|(q, _)| q.longitudinal)
            .map(|(_, &o)| (o + 2, order.dim_at(0)))
            .collect();
        longitudinal.push(self.longitudinal_head(dec, &rows));

        let long_queries: Vec<&Query> = queries.iter().filter(|q| q.longitudinal).collect();
        for k in 1..m {
            let groups: Vec<DecoderGroup> = long_queries
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let mut tokens = vec![DecoderToken::Predict(PredKind::Intensity), DecoderToken::Predict(PredKind::Hazard)];
                    for prev in 0..k {
                        let value = match q.overrides.get(prev).copied().flatten() {
                            Some(v) => Scalar::Const(v),
                            None => Scalar::Elem(longitudinal[prev], i, 0),
                        };
                        tokens.push(DecoderToken::Value {
                            dim: order.dim_at(prev),
                            value,
                        });
                    }
                    tokens.push(DecoderToken::Predict(PredKind::Longitudinal(order.dim_at(k))));
                    DecoderGroup {
                        time: q.time,
                        history: q.history,
                        tokens,
                    }
                })
                .collect();
            let offsets = group_offsets(&groups);
            let dec = self.decode(enc, &groups);
            let rows: Vec<(usize, usize)> = offsets.iter().map(|&o| (o + 2 + k, order.dim_at(k))).collect();
            longitudinal.push(self.longitudinal_head(dec, &rows));
        }
        Predictions {
            intensity,
            hazard,
            longitudinal,
            long_index,
        }
    }

    /// Reads evaluated predictions into plain numbers.
    pub fn read(&self, preds: &Predictions, queries: &[Query]) -> Vec<QueryResult> {
        let order = &self.params.meta.order;
        let lam = self.tape.value(preds.intensity);
        let haz = self.tape.value(preds.hazard);
        queries
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let longitudinal = preds.long_index[i].map(|li| {
                    let mut y = vec![0.0; order.len()];
                    for (k, col) in preds.longitudinal.iter().enumerate() {
                        y[order.dim_at(k)] = self.tape.value(*col)[[li, 0]];
                    }
                    y
                });
                QueryResult {
                    intensity: lam[[i, 0]],
                    hazard: haz[[i, 0]],
                    longitudinal,
                }
            })
            .collect()
    }
}

/// Plain-number result of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub intensity: f64,
    pub hazard: f64,
    /// Forecast indexed by dimension (not by order position).
    pub longitudinal: Option<Vec<f64>>,
}

fn group_offsets(groups: &[DecoderGroup]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(groups.len());
    let mut o = 0;
    for g in groups {
        offsets.push(o);
        o += g.tokens.len();
    }
    offsets
}

/// Causal pattern over observed keys: row `l` may attend to observed `z <= l`.
pub fn encoder_pattern(observed: &[bool]) -> AttentionPattern {
    let mut rows = Vec::with_capacity(observed.len());
    let mut allowed: Vec<u32> = Vec::new();
    for (l, &o) in observed.iter().enumerate() {
        if o {
            allowed.push(l as u32);
        }
        rows.push(allowed.clone());
    }
    AttentionPattern {
        n_keys: observed.len(),
        rows,
    }
}

/// Converts a dense boolean mask into an attention pattern.
pub fn pattern_from_mask(mask: &Array2<bool>) -> AttentionPattern {
    AttentionPattern {
        n_keys: mask.ncols(),
        rows: mask
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &a)| a).map(|(z, _)| z as u32).collect())
            .collect(),
    }
}

/// Self-attention is causal within each group; cross-attention sees the
/// observed encoder tokens of the group's history.
pub fn decoder_patterns(groups: &[DecoderGroup], enc: &Encoded) -> (AttentionPattern, AttentionPattern) {
    let n: usize = groups.iter().map(|g| g.tokens.len()).sum();
    let mut self_rows = Vec::with_capacity(n);
    let mut cross_rows = Vec::with_capacity(n);
    let mut start = 0u32;
    for g in groups {
        let visible = (g.history * enc.tokens_per_visit).min(enc.observed.len());
        let cross: Vec<u32> = (0..visible).filter(|&z| enc.observed[z]).map(|z| z as u32).collect();
        for k in 0..g.tokens.len() as u32 {
            self_rows.push((start..=start + k).collect());
            cross_rows.push(cross.clone());
        }
        start += g.tokens.len() as u32;
    }
    (
        AttentionPattern {
            n_keys: n,
            rows: self_rows,
        },
        AttentionPattern {
            n_keys: enc.observed.len(),
            rows: cross_rows,
        },
    )
}

/// Evaluation-mode forward of one encoder layer on given inputs.
pub fn masked_attention(params: &ModelParameters, layer: usize, inputs: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    let pattern = pattern_from_mask(mask);
    if let Some(row) = pattern.rows.iter().position(Vec::is_empty) {
        return Err(LsrError::EmptyAttentionRow(row));
    }
    let mut run = ModelRun::new(params, &vec![0.0; params.config.p], None);
    let x = run.tape.constant(inputs.clone());
    let out = run.encoder_layer(x, layer, Rc::new(pattern));
    Ok(run.tape.value(out).clone())
}

/// Evaluation-mode encoder stack over embedded tokens.
pub fn encode(params: &ModelParameters, embedded: &Array2<f64>, observed: &[bool]) -> Array2<f64> {
    let mut run = ModelRun::new(params, &vec![0.0; params.config.p], None);
    let x = run.tape.constant(embedded.clone());
    let out = run.encode_embedded(x, observed);
    run.tape.value(out).clone()
}

/// Evaluation-mode decoder stack: `prediction_tokens` rows are split into
/// `groups` (token counts and history sizes), attending to `encoder_out`.
pub fn decode(
    params: &ModelParameters,
    encoder_out: &Array2<f64>,
    encoder_observed: &[bool],
    prediction_tokens: &Array2<f64>,
    groups: &[DecoderGroup],
) -> Array2<f64> {
    let mut run = ModelRun::new(params, &vec![0.0; params.config.p], None);
    let enc = Encoded {
        out: run.tape.constant(encoder_out.clone()),
        observed: encoder_observed.to_vec(),
        tokens_per_visit: params.config.m,
    };
    let y = run.tape.constant(prediction_tokens.clone());
    let out = run.decode_embedded(y, &enc, groups);
    run.tape.value(out).clone()
}

/// `(λ, h, Ŷ)` from final decoder rows `Φ_λ`, `Φ_h` and `Φ_{Y_u}` (one per
/// dimension).
pub fn heads(params: &ModelParameters, phi_lambda: &[f64], phi_hazard: &[f64], phi_y: &[Vec<f64>]) -> (f64, f64, Vec<f64>) {
    let h = &params.layout.heads;
    let t = &params.tensors;
    let affine = |phi: &[f64], w: &Array2<f64>, b: &Array2<f64>, col: usize| -> f64 {
        phi.iter().enumerate().map(|(i, x)| x * w[[i, col]]).sum::<f64>() + b[[0, col]]
    };
    let lambda = softplus(affine(phi_lambda, &t[h.lambda_w], &t[h.lambda_b], 0));
    let hazard = softplus(affine(phi_hazard, &t[h.hazard_w], &t[h.hazard_b], 0));
    let y = phi_y
        .iter()
        .enumerate()
        .map(|(u, phi)| affine(phi, &t[h.y_w], &t[h.y_b], u))
        .collect();
    (lambda, hazard, y)
}
