//! Token embeddings: `[covariates | type-specific value | sinusoidal time]`.
//!
//! The three blocks are concatenated, never summed, so each block can only be
//! changed by its own inputs.

use ndarray::Array2;

use crate::autodiff::{RowEmbed, Scalar, Tape, Var};
use crate::data::TokenKind;
use crate::error::{LsrError, Result};
use crate::transformer::{ModelParameters, ParamVars};

/// Sinusoidal time features, components indexed `s = 1..=d_time`:
/// `sin(t / 10000^(s / d_time))` for even `s` and
/// `cos(t / 10000^((s - 1) / d_time))` for odd `s`.
pub fn temporal_embedding(t: f64, d_time: usize) -> Vec<f64> {
    (1..=d_time)
        .map(|s| {
            if s % 2 == 0 {
                (t / 10000f64.powf(s as f64 / d_time as f64)).sin()
            } else {
                (t / 10000f64.powf((s - 1) as f64 / d_time as f64)).cos()
            }
        })
        .collect()
}

/// Prediction-token kinds: intensity, hazard, then one per longitudinal
/// dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredKind {
    Intensity,
    Hazard,
    Longitudinal(usize),
}

impl PredKind {
    pub fn index(self) -> usize {
        match self {
            PredKind::Intensity => 0,
            PredKind::Hazard => 1,
            PredKind::Longitudinal(u) => 2 + u,
        }
    }

    pub fn count(m: usize) -> usize {
        2 + m
    }
}

/// One row to embed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedRow {
    pub time: f64,
    pub kind: RowEmbed,
    pub value: Scalar,
}

/// Per-forward embedding context; the covariate block is computed once.
pub struct Embedder {
    cov: Var,
}

impl Embedder {
    pub fn new(tape: &mut Tape, vars: &ParamVars, covariates: &[f64]) -> Self {
        let x = tape.constant(Array2::from_shape_vec((1, covariates.len()), covariates.to_vec()).expect("covariate row"));
        let cov = tape.affine(x, vars.get(vars.ids.embed.cov_w), vars.get(vars.ids.embed.cov_b));
        Self { cov }
    }

    /// Embeds `rows` into an `n x d_model` block.
    pub fn embed(&self, tape: &mut Tape, vars: &ParamVars, d_time: usize, rows: &[EmbedRow]) -> Var {
        let n = rows.len();
        let cov = tape.broadcast_row(self.cov, n);
        let values = tape.assemble(rows.iter().map(|r| r.value).collect());
        let e = &vars.ids.embed;
        let typed = tape.token_embed(
            values,
            vars.get(e.val_w),
            vars.get(e.val_b),
            vars.get(e.pred),
            rows.iter().map(|r| r.kind).collect(),
        );
        let mut time = Array2::zeros((n, d_time));
        for (i, r) in rows.iter().enumerate() {
            for (c, v) in temporal_embedding(r.time, d_time).into_iter().enumerate() {
                time[[i, c]] = v;
            }
        }
        let time = tape.constant(time);
        tape.concat_cols(&[cov, typed, time])
    }
}

/// Embedding row for a history token or a prediction token.
pub fn row_for(kind: TokenKind, time: f64, value: f64, is_prediction: bool, m: usize) -> Result<EmbedRow> {
    let row_kind = match (kind, is_prediction) {
        (TokenKind::Longitudinal(u), false) if u < m => RowEmbed::Value(u),
        (TokenKind::Longitudinal(u), true) if u < m => RowEmbed::Prediction(PredKind::Longitudinal(u).index()),
        (TokenKind::Intensity, true) => RowEmbed::Prediction(PredKind::Intensity.index()),
        (TokenKind::Hazard, true) => RowEmbed::Prediction(PredKind::Hazard.index()),
        _ => {
            return Err(LsrError::InvalidRecord(format!(
                "cannot embed token kind {kind:?} (prediction = {is_prediction})"
            )))
        }
    };
    Ok(EmbedRow {
        time,
        kind: row_kind,
        value: Scalar::Const(if is_prediction { 0.0 } else { value }),
    })
}

/// Embeds a single token outside of any training graph.
pub fn embed_token(
    params: &ModelParameters,
    kind: TokenKind,
    time: f64,
    value: f64,
    is_prediction: bool,
    covariates: &[f64],
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let row = row_for(kind, time, value, is_prediction, cfg.m)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let emb = Embedder::new(&mut tape, &vars, covariates);
    let out = emb.embed(&mut tape, &vars, cfg.d_time, &[row]);
    Ok(tape.value(out).row(0).to_vec())
}

/// Embeds every token of a stream, one row per token (masked slots included).
pub fn embed_stream(params: &ModelParameters, stream: &crate::data::TokenStream, covariates: &[f64]) -> Result<Array2<f64>> {
    let cfg = &params.config;
    let rows = stream
        .tokens
        .iter()
        .map(|t| row_for(t.kind, t.time, t.value, t.is_prediction, cfg.m))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let emb = Embedder::new(&mut tape, &vars, covariates);
    let out = emb.embed(&mut tape, &vars, cfg.d_time, &rows);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_causal_mask, Token, TokenStream};
    use crate::transformer::ModelConfig;

    #[test]
    fn temporal_embedding_at_zero() {
        let e = temporal_embedding(0.0, 16);
        for (i, v) in e.iter().enumerate() {
            let s = i + 1;
            assert_eq!(*v, if s % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn temporal_embedding_bounded_and_paired() {
        for &t in &[0.3, 17.0, 999.9, 15999.0] {
            let e = temporal_embedding(t, 16);
            assert!(e.iter().all(|v| v.abs() <= 1.0));
            // s = 2k (sin) and s = 2k + 1 (cos) share the frequency 10000^(-2k/d)
            for k in 1..8 {
                let (sin, cos) = (e[2 * k - 1], e[2 * k]);
                assert!((sin * sin + cos * cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_embedding_distinguishes_times() {
        let a = temporal_embedding(1000.0, 16);
        let b = temporal_embedding(1000.5, 16);
        assert_ne!(a, b);
    }

    fn zeroed_params() -> ModelParameters {
        let mut p = ModelParameters::init(&ModelConfig::default(), 1);
        for t in p.tensors.iter_mut() {
            t.fill(0.0);
        }
        p
    }

    #[test]
    fn zero_maps_leave_only_time() {
        let p = zeroed_params();
        let v = embed_token(&p, TokenKind::Longitudinal(1), 42.0, 3.5, false, &[1.0, 2.0, 0.0]).unwrap();
        let cfg = &p.config;
        assert_eq!(v.len(), cfg.d_model());
        assert!(v[..cfg.d_base + cfg.d_type].iter().all(|&x| x == 0.0));
        assert_eq!(&v[cfg.d_base + cfg.d_type..], temporal_embedding(42.0, cfg.d_time).as_slice());
    }

    #[test]
    fn blocks_do_not_interact() {
        let p = ModelParameters::init(&ModelConfig::default(), 3);
        let cfg = &p.config;
        let (b, ty) = (cfg.d_base, cfg.d_base + cfg.d_type);
        let x = [0.5, -1.0, 1.0];
        let a = embed_token(&p, TokenKind::Longitudinal(0), 10.0, 2.0, false, &x).unwrap();
        let other_type = embed_token(&p, TokenKind::Longitudinal(2), 10.0, 2.0, false, &x).unwrap();
        assert_eq!(a[..b], other_type[..b]);
        assert_ne!(a[b..ty], other_type[b..ty]);
        assert_eq!(a[ty..], other_type[ty..]);

        let later = embed_token(&p, TokenKind::Longitudinal(0), 11.0, 2.0, false, &x).unwrap();
        assert_eq!(a[..ty], later[..ty]);
        assert_ne!(a[ty..], later[ty..]);

        let other_x = embed_token(&p, TokenKind::Longitudinal(0), 10.0, 2.0, false, &[0.0, 0.0, 0.0]).unwrap();
        assert_ne!(a[..b], other_x[..b]);
        assert_eq!(a[b..], other_x[b..]);
    }

    #[test]
    fn unknown_kind_errors() {
        let p = ModelParameters::init(&ModelConfig::default(), 3);
        assert!(embed_token(&p, TokenKind::Intensity, 1.0, 0.0, false, &[0.0; 3]).is_err());
        assert!(embed_token(&p, TokenKind::Longitudinal(7), 1.0, 0.0, false, &[0.0; 3]).is_err());
    }

    #[test]
    fn stream_rows_follow_tokens() {
        let p = ModelParameters::init(&ModelConfig::default(), 5);
        let tok = |t: f64, u: usize, v: f64| Token { time: t, kind: TokenKind::Longitudinal(u), value: v, is_prediction: false };
        let mk = |tokens: Vec<Token>| TokenStream {
            observed_mask: vec![true; tokens.len()],
            causal_mask: build_causal_mask(tokens.len(), &vec![true; tokens.len()]).unwrap(),
            tokens,
        };
        let x = [0.1, 0.2, 1.0];
        let one = embed_stream(&p, &mk(vec![tok(1.0, 0, 2.0)]), &x).unwrap();
        assert_eq!(one.dim(), (1, 64));
        let ab = embed_stream(&p, &mk(vec![tok(1.0, 0, 2.0), tok(2.0, 1, 5.0)]), &x).unwrap();
        let ba = embed_stream(&p, &mk(vec![tok(2.0, 1, 5.0), tok(1.0, 0, 2.0)]), &x).unwrap();
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));
        assert_eq!(ab, embed_stream(&p, &mk(vec![tok(1.0, 0, 2.0), tok(2.0, 1, 5.0)]), &x).unwrap());
    }
}
