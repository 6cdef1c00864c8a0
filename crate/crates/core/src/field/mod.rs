//! Neural attenuation field `(x, y, z, ρ₀) → ρ`.
//!
//! Positions go through a multiresolution hash grid, the prior value ρ₀
//! through a learnable affine map, and the concatenation of both through a
//! rectifier MLP whose scalar output is made non-negative by the output map.
//! All parameters live in one flat vector described by [`ParamSlot`]s, which
//! is also the checkpoint layout.

pub mod adam;
pub mod hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
pub use adam::{adam_step, AdamConfig, AdamState};
use hash::{HashCache, HashGrid};

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in field evaluation")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMap {
    Softplus,
    Relu,
}

impl OutputMap {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputMap::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            OutputMap::Relu => x.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            OutputMap::Softplus => 1.0 / (1.0 + (-x).exp()),
            OutputMap::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputMap::Softplus => "softplus",
            OutputMap::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub levels: usize,
    pub table_size_log2: u32,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    /// Width k of the prior feature; 0 gives a position-only field.
    pub prior_width: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_map: OutputMap,
    /// Initial bias of the output unit.
    pub output_bias_init: f64,
    /// Prior encoder weights start uniform in `±prior_init_scale`.
    pub prior_init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            levels: 8,
            table_size_log2: 16,
            features_per_level: 2,
            base_resolution: 16,
            per_level_scale: 1.38,
            prior_width: 16,
            hidden_layers: 4,
            hidden_width: 64,
            output_map: OutputMap::Softplus,
            output_bias_init: -2.0,
            prior_init_scale: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn input_width(&self) -> usize {
        self.levels * self.features_per_level + self.prior_width
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidConfig(m.to_string()));
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return bad("levels, features_per_level and base_resolution must be >= 1");
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 28 {
            return bad("table_size_log2 must be in 1..=28");
        }
        if !(self.per_level_scale.is_finite() && self.per_level_scale > 1.0) {
            return bad("per_level_scale must be > 1");
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return bad("hidden_width must be >= 1");
        }
        if !self.output_bias_init.is_finite() || !self.prior_init_scale.is_finite() {
            return bad("initialization constants must be finite");
        }
        let grid = self.grid();
        if !grid.resolutions.windows(2).all(|w| w[1] > w[0]) {
            return bad("level resolutions must strictly increase");
        }
        Ok(())
    }

    fn grid(&self) -> HashGrid {
        HashGrid::new(
            self.levels,
            self.table_size(),
            self.features_per_level,
            self.base_resolution,
            self.per_level_scale,
        )
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub config: FieldConfig,
    pub params: Vec<f64>,
    grid: HashGrid,
    layout: Vec<ParamSlot>,
}

/// Per-sample activations kept for the backward pass, plus scratch space.
#[derive(Debug, Clone)]
pub struct SampleCache {
    hash: HashCache,
    rho0: f64,
    input: Vec<f64>,
    /// Pre-activations of every layer; the last one holds the output unit.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl FieldModel {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        let mut model = Self::zeroed(config)?;
        model.initialize(seed);
        Ok(model)
    }

    /// Model with every parameter zero.
    pub fn zeroed(config: FieldConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let grid = config.grid();
        let mut layout = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let slot = ParamSlot { name, shape, offset };
            offset += slot.len();
            layout.push(slot);
        };
        push(
            "hash.tables".into(),
            vec![config.levels, config.table_size(), config.features_per_level],
        );
        push("prior.weight".into(), vec![config.prior_width]);
        push("prior.bias".into(), vec![config.prior_width]);
        let mut fan_in = config.input_width();
        for l in 0..=config.hidden_layers {
            let out = if l == config.hidden_layers { 1 } else { config.hidden_width };
            push(format!("mlp.{l}.weight"), vec![out, fan_in]);
            push(format!("mlp.{l}.bias"), vec![out]);
            fan_in = out;
        }
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        Ok(FieldModel {
            config,
            params: vec![0.0; total],
            grid,
            layout,
        })
    }

    /// Rebuild a model from a flat parameter vector.
    pub fn from_params(config: FieldConfig, params: Vec<f64>) -> Result<Self, FieldError> {
        let mut model = Self::zeroed(config)?;
        if params.len() != model.params.len() {
            return Err(FieldError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = self.config.clone();
        let tables = self.slot("hash.tables").range();
        for p in &mut self.params[tables] {
            *p = rng.random_range(-1e-4..=1e-4);
        }
        let prior_w = self.slot("prior.weight").range();
        for p in &mut self.params[prior_w] {
            *p = (2.0 * rng.random::<f64>() - 1.0) * cfg.prior_init_scale;
        }
        let layers = self.layers();
        for (l, layer) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            let bound = if last {
                (6.0 / (layer.inputs + 1) as f64).sqrt()
            } else {
                (6.0 / layer.inputs.max(1) as f64).sqrt()
            };
            for p in &mut self.params[layer.weight..layer.weight + layer.inputs * layer.outputs] {
                *p = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
            if last {
                self.params[layer.bias] = cfg.output_bias_init;
            }
        }
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn slot(&self, name: &str) -> &ParamSlot {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn hash_tables(&self) -> &[f64] {
        &self.params[self.layout[0].range()]
    }

    pub fn prior_weight(&self) -> &[f64] {
        &self.params[self.layout[1].range()]
    }

    pub fn prior_bias(&self) -> &[f64] {
        &self.params[self.layout[2].range()]
    }

    fn layers(&self) -> Vec<Layer> {
        self.layout[3..]
            .chunks(2)
            .map(|pair| Layer {
                inputs: pair[0].shape[1],
                outputs: pair[0].shape[0],
                weight: pair[0].offset,
                bias: pair[1].offset,
            })
            .collect()
    }

    pub fn new_cache(&self) -> SampleCache {
        let widths: Vec<usize> = self.layers().iter().map(|l| l.outputs).collect();
        let widest = widths.iter().copied().chain([self.config.input_width()]).max().unwrap_or(1);
        SampleCache {
            hash: self.grid.new_cache(),
            rho0: 0.0,
            input: vec![0.0; self.config.input_width()],
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }

    /// Write `weight·ρ₀ + bias` into `out`.
    pub fn prior_encode(&self, rho0: f64, out: &mut [f64]) {
        let w = self.prior_weight();
        let b = self.prior_bias();
        for ((o, wi), bi) in out.iter_mut().zip(w).zip(b) {
            *o = wi * rho0 + bi;
        }
    }

    /// ρ at normalized position `p ∈ [0,1]³` with prior value `rho0`.
    pub fn forward(&self, p: &Vec3, rho0: f64, cache: &mut SampleCache) -> Result<f64, FieldError> {
        let hash_width = self.grid.output_width();
        let (hash_in, prior_in) = cache.input.split_at_mut(hash_width);
        let tables = &self.params[self.layout[0].range()];
        self.grid.encode(tables, p, hash_in, &mut cache.hash);
        self.prior_encode(rho0, prior_in);
        cache.rho0 = rho0;

        let layers = self.layers();
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let (done, rest) = cache.post.split_at_mut(l);
            let x: &[f64] = if l == 0 { &cache.input } else { &done[l - 1] };
            let z = &mut cache.pre[l];
            let w = &self.params[layer.weight..layer.weight + layer.inputs * layer.outputs];
            let b = &self.params[layer.bias..layer.bias + layer.outputs];
            for o in 0..layer.outputs {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                z[o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            }
            let a = &mut rest[0];
            for o in 0..layer.outputs {
                a[o] = if l == last {
                    self.config.output_map.apply(z[o])
                } else {
                    z[o].max(0.0)
                };
            }
        }
        let rho = cache.post[last][0];
        if !rho.is_finite() {
            return Err(FieldError::NonFinite);
        }
        Ok(rho)
    }

    /// Convenience single evaluation without keeping the cache.
    pub fn evaluate(&self, p: &Vec3, rho0: f64) -> Result<f64, FieldError> {
        self.forward(p, rho0, &mut self.new_cache())
    }

    /// Accumulate `upstream · ∂ρ/∂θ` into `grads` for the sample in `cache`.
    pub fn backward(&self, upstream: f64, cache: &mut SampleCache, grads: &mut [f64]) -> Result<(), FieldError> {
        if grads.len() != self.params.len() {
            return Err(FieldError::ShapeMismatch(format!(
                "gradient buffer has {} entries, model has {}",
                grads.len(),
                self.params.len()
            )));
        }
        let layers = self.layers();
        if cache.pre.len() != layers.len() || cache.input.len() != self.config.input_width() {
            return Err(FieldError::ShapeMismatch("cache does not belong to this model".into()));
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let last = layers.len() - 1;
        cache.delta[0] = upstream * self.config.output_map.derivative(cache.pre[last][0]);
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let delta = &cache.delta[..layer.outputs];
            {
                let (gw, gb) = grads[layer.weight..].split_at_mut(layer.bias - layer.weight);
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let w = &self.params[layer.weight..layer.weight + layer.inputs * layer.outputs];
            let prev = &mut cache.delta_prev[..layer.inputs];
            prev.fill(0.0);
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *p += d * wi;
                }
            }
            if l > 0 {
                let z = &cache.pre[l - 1];
                for (p, zi) in prev.iter_mut().zip(z) {
                    if *zi <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cache.delta, &mut cache.delta_prev);
        }
        // cache.delta now holds ∂/∂input.
        let hash_width = self.grid.output_width();
        let d_input = &cache.delta[..self.config.input_width()];
        let tables = self.layout[0].range();
        self.grid.backward(&cache.hash, &d_input[..hash_width], &mut grads[tables]);
        let k = self.config.prior_width;
        let (w_off, b_off) = (self.layout[1].offset, self.layout[2].offset);
        for i in 0..k {
            let d = d_input[hash_width + i];
            grads[w_off + i] += d * cache.rho0;
            grads[b_off + i] += d;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> FieldConfig {
        FieldConfig {
            levels: 2,
            table_size_log2: 4,
            features_per_level: 2,
            base_resolution: 2,
            per_level_scale: 2.0,
            prior_width: 3,
            hidden_layers: 2,
            hidden_width: 6,
            output_map: OutputMap::Softplus,
            output_bias_init: 0.1,
            prior_init_scale: 1.0,
        }
    }

    /// Spread parameters out so most rectifiers are active and gradients are
    /// not dominated by the tiny table initialization.
    fn toy_model(seed: u64) -> FieldModel {
        let mut m = FieldModel::new(toy_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in &mut m.params {
            *p = rng.random_range(-1.0..1.0);
        }
        m
    }

    fn finite_difference(model: &FieldModel, idx: usize, p: &Vec3, rho0: f64, h: f64) -> f64 {
        let mut plus = model.clone();
        plus.params[idx] += h;
        let mut minus = model.clone();
        minus.params[idx] -= h;
        (plus.evaluate(p, rho0).unwrap() - minus.evaluate(p, rho0).unwrap()) / (2.0 * h)
    }

    #[test]
    fn layout_chains() {
        let m = FieldModel::new(FieldConfig::default(), 0).unwrap();
        let names: Vec<&str> = m.layout().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[..3], ["hash.tables", "prior.weight", "prior.bias"]);
        assert_eq!(m.slot("mlp.0.weight").shape, vec![64, 8 * 2 + 16]);
        assert_eq!(m.slot("mlp.4.weight").shape, vec![1, 64]);
        let mut end = 0;
        for s in m.layout() {
            assert_eq!(s.offset, end);
            end += s.len();
        }
        assert_eq!(end, m.num_params());
    }

    #[test]
    fn table_init_range() {
        let m = FieldModel::new(FieldConfig::default(), 3).unwrap();
        assert!(m.hash_tables().iter().all(|x| x.abs() <= 1e-4));
        assert!(m.prior_bias().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_network_outputs_map_of_zero() {
        let m = FieldModel::zeroed(toy_config()).unwrap();
        let v = m.evaluate(&[0.2, 0.4, 0.9], 0.7).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let mut cfg = toy_config();
        cfg.output_map = OutputMap::Relu;
        assert_eq!(FieldModel::zeroed(cfg).unwrap().evaluate(&[0.5; 3], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn prior_encoder_is_affine() {
        let m = toy_model(1);
        let mut out = vec![0.0; 3];
        m.prior_encode(0.0, &mut out);
        assert_eq!(out, m.prior_bias());
        let mut m2 = m.clone();
        let b = m2.slot("prior.bias").range();
        m2.params[b].fill(0.0);
        m2.prior_encode(1.0, &mut out);
        assert_eq!(out, m2.prior_weight());
        // d(out)/d(rho0) equals the weight.
        let mut a = vec![0.0; 3];
        let mut c = vec![0.0; 3];
        m.prior_encode(0.25, &mut a);
        m.prior_encode(1.25, &mut c);
        for i in 0..3 {
            assert!((c[i] - a[i] - m.prior_weight()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn purity() {
        let m = toy_model(2);
        let p = [0.31, 0.77, 0.05];
        assert_eq!(m.evaluate(&p, 0.4).unwrap().to_bits(), m.evaluate(&p, 0.4).unwrap().to_bits());
    }

    #[test]
    fn every_parameter_matches_finite_differences() {
        for seed in 0..3 {
            let m = toy_model(seed);
            let p = [0.13 + 0.2 * seed as f64, 0.61, 0.37];
            let rho0 = 0.8;
            let mut cache = m.new_cache();
            m.forward(&p, rho0, &mut cache).unwrap();
            let mut grads = vec![0.0; m.num_params()];
            m.backward(1.0, &mut cache, &mut grads).unwrap();
            for idx in 0..m.num_params() {
                let fd = finite_difference(&m, idx, &p, rho0, 1e-4);
                let scale = fd.abs().max(grads[idx].abs());
                assert!(
                    (fd - grads[idx]).abs() <= 1e-3 * scale + 1e-10,
                    "param {idx}: analytic {} vs fd {fd}",
                    grads[idx]
                );
            }
        }
    }

    #[test]
    fn untouched_entries_get_no_gradient() {
        let m = toy_model(4);
        let mut cache = m.new_cache();
        m.forward(&[0.5, 0.5, 0.5], 0.1, &mut cache).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(1.0, &mut cache, &mut grads).unwrap();
        let touched: std::collections::HashSet<usize> = cache
            .hash
            .offsets
            .iter()
            .flatten()
            .flat_map(|&o| [o, o + 1])
            .collect();
        for i in m.slot("hash.tables").range() {
            if !touched.contains(&i) {
                assert_eq!(grads[i], 0.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = toy_model(5);
        let mut cache = m.new_cache();
        m.forward(&[0.1, 0.2, 0.3], 0.5, &mut cache).unwrap();
        let mut grads = vec![0.0; m.num_params()];
        m.backward(0.0, &mut cache, &mut grads).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_samples() {
        let m = toy_model(6);
        let samples = [([0.1, 0.2, 0.3], 0.5, 0.7), ([0.9, 0.4, 0.6], 0.1, -1.3), ([0.5, 0.5, 0.2], 0.9, 0.4)];
        let mut batch = vec![0.0; m.num_params()];
        let mut separate = vec![vec![0.0; m.num_params()]; samples.len()];
        for (i, (p, r, g)) in samples.iter().enumerate() {
            let mut cache = m.new_cache();
            m.forward(p, *r, &mut cache).unwrap();
            m.backward(*g, &mut cache, &mut batch).unwrap();
            m.backward(*g, &mut cache, &mut separate[i]).unwrap();
        }
        for j in 0..m.num_params() {
            let sum: f64 = separate.iter().map(|s| s[j]).sum();
            assert!((sum - batch[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn position_only_field_ignores_prior() {
        let mut cfg = toy_config();
        cfg.prior_width = 0;
        let m = FieldModel::new(cfg, 9).unwrap();
        let p = [0.4, 0.3, 0.2];
        assert_eq!(m.evaluate(&p, 0.0).unwrap(), m.evaluate(&p, 5.0).unwrap());
        assert_eq!(m.slot("mlp.0.weight").shape[1], 4);
    }

    #[test]
    fn shape_errors() {
        let m = toy_model(7);
        let mut cache = m.new_cache();
        m.forward(&[0.1; 3], 0.0, &mut cache).unwrap();
        assert!(m.backward(1.0, &mut cache, &mut [0.0; 3]).is_err());
        let other = FieldModel::new(FieldConfig::default(), 0).unwrap();
        let mut grads = vec![0.0; other.num_params()];
        assert!(other.backward(1.0, &mut cache, &mut grads).is_err());
        assert!(FieldModel::from_params(toy_config(), vec![0.0; 5]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config();
        cfg.per_level_scale = 1.0;
        assert!(FieldModel::new(cfg, 0).is_err());
        let mut cfg = toy_config();
        cfg.base_resolution = 2;
        cfg.per_level_scale = 1.2;
        // floor(2 * 1.2) == 2, so resolutions would not increase.
        assert!(cfg.validate().is_err());
    }
}
