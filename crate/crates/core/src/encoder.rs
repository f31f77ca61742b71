//! Per-field event embedding with additive time positional encoding.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seqdata::{EventSequence, Schema, TimeStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Embedding width of each categorical field, in schema order.
    pub categorical_dims: Vec<usize>,
    pub d_model: usize,
    /// Number of leading model dimensions that receive the positional encoding.
    pub d_pe: usize,
    /// Smallest time scale `m`.
    pub min_scale: f64,
    /// Largest time scale `M`.
    pub max_scale: f64,
}

impl EmbedderConfig {
    /// One `cat_dim`-wide table per categorical field and `d_pe = d_model`.
    pub fn for_schema(schema: &Schema, cat_dim: usize, d_model: usize, time: TimeStats) -> Self {
        EmbedderConfig {
            categorical_dims: vec![cat_dim; schema.num_categorical()],
            d_model,
            d_pe: d_model,
            min_scale: time.min_scale,
            max_scale: time.max_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model must be positive"));
        }
        if self.d_pe % 2 != 0 || self.d_pe > self.d_model {
            return Err(Error::config(format!(
                "d_pe must be even and at most d_model, got {} (d_model {})",
                self.d_pe, self.d_model
            )));
        }
        if !(self.min_scale > 0.0) || !(self.max_scale >= self.min_scale) {
            return Err(Error::config(format!(
                "time scales need 0 < m <= M, got m={} M={}",
                self.min_scale, self.max_scale
            )));
        }
        if self.categorical_dims.contains(&0) {
            return Err(Error::config("categorical embedding widths must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a timestamp, `d_pe` components.
pub fn positional_encoding(t: f64, config: &EmbedderConfig) -> Vec<f64> {
    let (m, big_m, d) = (config.min_scale, config.max_scale, config.d_pe as f64);
    let base = 5.0 * big_m / m;
    (0..config.d_pe)
        .map(|i| {
            if i % 2 == 0 {
                (t / (m * base.powf(i as f64 / d))).sin()
            } else {
                (t / (m * base.powf((i - 1) as f64 / d))).cos()
            }
        })
        .collect()
}

/// `[n, d_model]` matrix whose first `d_pe` columns hold the encodings of `timestamps`.
pub fn positional_matrix(timestamps: &[f64], config: &EmbedderConfig) -> Tensor {
    let d = config.d_model;
    let mut data = vec![0.0; timestamps.len() * d];
    for (r, t) in timestamps.iter().enumerate() {
        data[r * d..r * d + config.d_pe].copy_from_slice(&positional_encoding(*t, config));
    }
    Tensor::matrix(timestamps.len(), d, data)
}

/// Parameters of the event embedder.
#[derive(Clone, Debug)]
pub struct Embedder {
    config: EmbedderConfig,
    cardinalities: Vec<usize>,
    num_numerical: usize,
    tables: Vec<ParamId>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Embedder {
    pub fn new(schema: &Schema, config: EmbedderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.categorical_dims.len() != schema.num_categorical() {
            return Err(Error::config(format!(
                "{} categorical widths for {} categorical fields",
                config.categorical_dims.len(),
                schema.num_categorical()
            )));
        }
        let mut tables = Vec::new();
        let mut cardinalities = Vec::new();
        for ((name, card), dim) in schema.categorical().zip(&config.categorical_dims) {
            tables.push(store.add(format!("embed.{name}"), Tensor::randn(&[card, *dim], 1.0, rng)));
            cardinalities.push(card);
        }
        let width = config.categorical_dims.iter().sum::<usize>() + schema.num_numerical();
        if width == 0 {
            return Err(Error::Schema("schema has no fields to embed".into()));
        }
        let std = 1.0 / (width as f64).sqrt();
        let proj_w = store.add("embed.proj.w", Tensor::randn(&[width, config.d_model], std, rng));
        let proj_b = store.add("embed.proj.b", Tensor::zeros(&[1, config.d_model]));
        Ok(Embedder { config, cardinalities, num_numerical: schema.num_numerical(), tables, proj_w, proj_b })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    /// Width of the concatenated per-field features.
    pub fn feature_width(&self) -> usize {
        self.config.categorical_dims.iter().sum::<usize>() + self.num_numerical
    }

    fn check(&self, seq: &EventSequence) -> Result<()> {
        if seq.categorical.len() != self.tables.len() || seq.numerical.len() != self.num_numerical {
            return Err(Error::Validation {
                id: seq.id.clone(),
                field: "*".into(),
                msg: "field count does not match the embedder".into(),
            });
        }
        for (f, (col, card)) in seq.categorical.iter().zip(&self.cardinalities).enumerate() {
            if let Some(bad) = col.iter().find(|c| **c as usize >= *card) {
                return Err(Error::Validation {
                    id: seq.id.clone(),
                    field: format!("#{f}"),
                    msg: format!("code {bad} out of range for cardinality {card}"),
                });
            }
        }
        Ok(())
    }

    /// `[N, feature_width]`: categorical embeddings followed by raw numericals.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Var> {
        self.check(seq)?;
        let n = seq.len();
        let mut parts = Vec::new();
        for (id, col) in self.tables.iter().zip(&seq.categorical) {
            let table = g.param(store, *id);
            let idx: Vec<usize> = col.iter().map(|c| *c as usize).collect();
            parts.push(g.gather_rows(table, &idx));
        }
        if self.num_numerical > 0 {
            let mut data = Vec::with_capacity(n * self.num_numerical);
            for i in 0..n {
                data.extend(seq.numerical.iter().map(|col| col[i]));
            }
            parts.push(g.constant(Tensor::matrix(n, self.num_numerical, data)));
        }
        Ok(g.concat_cols(&parts))
    }

    /// `[N, d_model]` projected event embeddings, without positional encoding.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Var> {
        let feats = self.features(g, store, seq)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let h = g.matmul(feats, w);
        Ok(g.add_row(h, b))
    }

    /// `[N, d_model]` event embeddings plus the positional encoding of each timestamp.
    pub fn encode_sequence(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Var> {
        let h = self.project(g, store, seq)?;
        let pe = g.constant(positional_matrix(&seq.timestamps, &self.config));
        Ok(g.add(h, pe))
    }

    /// Embedding of event `i` alone, without positional encoding.
    pub fn encode_event(&self, store: &ParamStore, seq: &EventSequence, i: usize) -> Result<Vec<f64>> {
        let one = seq.slice(i, i + 1);
        let mut g = Graph::new();
        let v = self.project(&mut g, store, &one)?;
        Ok(g.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::seqdata::FieldSchema;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(vec![
            FieldSchema::categorical("a", 5),
            FieldSchema::numerical("x"),
            FieldSchema::categorical("b", 3),
        ])
        .unwrap()
    }

    fn config(d: usize) -> EmbedderConfig {
        EmbedderConfig { categorical_dims: vec![3, 2], d_model: d, d_pe: d, min_scale: 0.5, max_scale: 40.0 }
    }

    fn seq(n: usize) -> EventSequence {
        EventSequence {
            id: "s".into(),
            timestamps: (0..n).map(|i| i as f64 * 1.5).collect(),
            categorical: vec![(0..n).map(|i| (i % 5) as u32).collect(), (0..n).map(|i| (i % 3) as u32).collect()],
            numerical: vec![(0..n).map(|i| i as f64 * 0.1 - 0.3).collect()],
            labels: Default::default(),
        }
    }

    fn scalar_pe(t: f64, i: usize, m: f64, big_m: f64, d: usize) -> f64 {
        let k = if i % 2 == 0 { i } else { i - 1 };
        let denom = m * (5.0 * big_m / m).powf(k as f64 / d as f64);
        if i % 2 == 0 {
            (t / denom).sin()
        } else {
            (t / denom).cos()
        }
    }

    #[test]
    fn pe_at_zero_and_first_component() {
        let c = config(8);
        let pe = positional_encoding(0.0, &c);
        for (i, v) in pe.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(positional_encoding(3.7, &c)[0], (3.7f64 / 0.5).sin());
    }

    proptest! {
        #[test]
        fn pe_matches_scalar_oracle(t in 0.0f64..1e4, m in 0.01f64..10.0, ratio in 1.0f64..1e3, half in 1usize..16) {
            let d = half * 2;
            let c = EmbedderConfig { categorical_dims: vec![], d_model: d, d_pe: d, min_scale: m, max_scale: m * ratio };
            let pe = positional_encoding(t, &c);
            for (i, v) in pe.iter().enumerate() {
                prop_assert!((v - scalar_pe(t, i, m, m * ratio, d)).abs() <= 1e-12);
                prop_assert!(v.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn code_lookup_is_verbatim_and_zero_tables_give_zero_features() {
        let r = &mut rng::seeded(0);
        let mut store = ParamStore::new();
        let e = Embedder::new(&schema(), config(4), &mut store, r).unwrap();
        let mut s = seq(4);
        s.categorical[0][2] = 3;
        let mut g = Graph::new();
        let f = e.features(&mut g, &store, &s).unwrap();
        let table = store.get(store.id("embed.a").unwrap());
        assert_eq!(&g.value(f).row(2)[..3], table.row(3));
        assert_eq!(g.value(f).row(2)[3..5], store.get(store.id("embed.b").unwrap()).row(2)[..]);
        assert_eq!(g.value(f).row(2)[5], s.numerical[0][2]);

        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("embed.a") || store.name(id).starts_with("embed.b") {
                let shape = store.get(id).shape().to_vec();
                store.replace(id, Tensor::zeros(&shape));
            }
        }
        s.numerical[0].iter_mut().for_each(|x| *x = 0.0);
        let v = e.encode_event(&store, &s, 1).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn gradient_touches_one_row_per_field() {
        let r = &mut rng::seeded(1);
        let mut store = ParamStore::new();
        let e = Embedder::new(&schema(), config(4), &mut store, r).unwrap();
        let s = seq(6).slice(3, 4);
        let mut g = Graph::new();
        let out = e.encode_sequence(&mut g, &store, &s).unwrap();
        let loss = g.sum(out);
        let grads = g.backward(loss);
        let mut pg = crate::diffcore::ParamGrads::zeros(&store);
        grads.accumulate_params(&g, &mut pg);
        let a = pg.get(store.id("embed.a").unwrap());
        let nonzero_rows: Vec<usize> = (0..5).filter(|r| a[r * 3..r * 3 + 3].iter().any(|x| *x != 0.0)).collect();
        assert_eq!(nonzero_rows, vec![3]);
        let b = pg.get(store.id("embed.b").unwrap());
        let nonzero_rows: Vec<usize> = (0..3).filter(|r| b[r * 2..r * 2 + 2].iter().any(|x| *x != 0.0)).collect();
        assert_eq!(nonzero_rows, vec![0]);
    }

    #[test]
    fn embedder_grad_check() {
        let r = &mut rng::seeded(2);
        let mut store = ParamStore::new();
        let e = Embedder::new(&schema(), config(4), &mut store, r).unwrap();
        let s = seq(3);
        let rep = crate::diffcore::grad_check_params(&store, |g, st| e.encode_sequence(g, st, &s), r).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn shapes_and_time_shift() {
        let r = &mut rng::seeded(3);
        let mut store = ParamStore::new();
        let e = Embedder::new(&schema(), config(6), &mut store, r).unwrap();
        let mut g = Graph::new();
        let empty = e.encode_sequence(&mut g, &store, &seq(0)).unwrap();
        assert_eq!(g.value(empty).shape(), &[0, 6]);

        let base = seq(5);
        let mut shifted = base.clone();
        shifted.timestamps.iter_mut().for_each(|t| *t += 7.25);
        let a = e.encode_sequence(&mut g, &store, &base).unwrap();
        let b = e.encode_sequence(&mut g, &store, &shifted).unwrap();
        let c = e.config();
        for i in 0..5 {
            let pa = positional_encoding(base.timestamps[i], c);
            let pb = positional_encoding(shifted.timestamps[i], c);
            for j in 0..6 {
                let diff = g.value(b).at(i, j) - g.value(a).at(i, j);
                assert!((diff - (pb[j] - pa[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let r = &mut rng::seeded(4);
        let mut store = ParamStore::new();
        let e = Embedder::new(&schema(), config(4), &mut store, r).unwrap();
        let mut s = seq(2);
        s.categorical[1][0] = 3;
        let mut g = Graph::new();
        assert!(matches!(e.features(&mut g, &store, &s), Err(Error::Validation { .. })));
    }
}
