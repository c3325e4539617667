//! Parameter layout, initialization and graph binding for the full model.
//!
//! Naming convention (checkpoint-portable):
//!
//! * `enc.in.{w,b}` input projection
//! * `enc.{layer}.attn.{ln.g,ln.b,wq,bq,wk,bk,wv,bv,wo,bo,rel_bias}`
//! * `enc.{layer}.ff.{ln.g,ln.b,w1,b1,w2,b2}`
//! * `enc.out_ln.{g,b}`
//! * `phone.{w,b}` phonetic (CTC) head
//! * `stcn.*`, `lstm.*`, `save.*` summary heads

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{lit, Real, Tensor, Var};
use crate::checkpoint::ParamStore;
use crate::config::{ModelConfig, SummaryKind};
use crate::error::{FtmError, Result};

/// Per-forward state: train flag and the dropout RNG.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Parameters of a store bound as graph leaves.
pub struct Bound<T: Real = f32> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Real> Bound<T> {
    pub fn new(store: &ParamStore<T>, trainable: bool) -> Self {
        Bound {
            vars: store
                .iter()
                .map(|(k, v)| (k.to_string(), Var::leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Binds existing graph nodes by name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| FtmError::Data(format!("missing parameter {name}")))
    }

    /// Gradients accumulated on each bound leaf, by name.
    pub fn grads(&self) -> HashMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(shape, (0..n).map(|_| lit(d.sample(rng))).collect()).expect("shape")
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
    normal(rng, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn dense<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    store.insert(w, glorot(rng, fan_in, fan_out, &[fan_in, fan_out]));
    store.insert(b, Tensor::zeros(&[fan_out]));
}

fn norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

/// Size of the relative-position table: distances −(2S−1) ..= 2S−1.
pub fn rel_bias_len(cfg: &ModelConfig) -> usize {
    2 * max_rel_dist(cfg) + 1
}

pub fn max_rel_dist(cfg: &ModelConfig) -> usize {
    2 * cfg.block_shift - 1
}

pub fn init_encoder<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let d = cfg.d_model;
    dense(store, rng, "enc.in.w", "enc.in.b", cfg.input_dim, d);
    for l in 0..cfg.n_layers {
        let a = format!("enc.{l}.attn");
        norm(store, &format!("{a}.ln"), d);
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            dense(store, rng, &format!("{a}.{w}"), &format!("{a}.{b}"), d, d);
        }
        store.insert(format!("{a}.rel_bias"), normal(rng, &[cfg.n_heads, rel_bias_len(cfg)], 0.02));
        let f = format!("enc.{l}.ff");
        norm(store, &format!("{f}.ln"), d);
        dense(store, rng, &format!("{f}.w1"), &format!("{f}.b1"), d, cfg.d_ff);
        dense(store, rng, &format!("{f}.w2"), &format!("{f}.b2"), cfg.d_ff, d);
    }
    norm(store, "enc.out_ln", d);
}

pub fn init_phone_head<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    dense(store, rng, "phone.w", "phone.b", cfg.d_model, cfg.phone_alphabet + 1);
}

pub fn init_summary_head<T: Real>(cfg: &ModelConfig, kind: SummaryKind, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let d = cfg.d_model;
    match kind {
        SummaryKind::Stcn => {
            let c = cfg.tcn_channels;
            for unit in 0..cfg.tcn_units {
                let p = format!("stcn.{unit}");
                let (c_in, k_a, k_b) = if unit == 0 { (d, cfg.k1, cfg.k2) } else { (c, 1, 1) };
                // Weight-normalised kernels start with g = ‖v‖ per output channel.
                for (name, fan_in, k) in [("conv1", c_in, k_a), ("conv2", c, k_b)] {
                    let v: Tensor<T> = glorot(rng, fan_in * k, c, &[c, k * fan_in]);
                    let g: Vec<T> = (0..c).map(|o| v.row(o).iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
                    store.insert(format!("{p}.{name}.v"), v);
                    store.insert(format!("{p}.{name}.g"), Tensor::from_vec(&[c], g).expect("shape"));
                    store.insert(format!("{p}.{name}.b"), Tensor::zeros(&[c]));
                }
                dense(store, rng, &format!("{p}.skip.w"), &format!("{p}.skip.b"), c_in, c);
            }
            dense(store, rng, "stcn.cls.w", "stcn.cls.b", c, cfg.n_classes);
        }
        SummaryKind::Slstm | SummaryKind::A2aLstm => {
            let h = cfg.lstm_hidden;
            store.insert("lstm.w_ih", glorot(rng, d, 4 * h, &[d, 4 * h]));
            store.insert("lstm.w_hh", glorot(rng, h, 4 * h, &[h, 4 * h]));
            // Forget-gate bias starts at 1.
            let mut b = vec![T::zero(); 4 * h];
            b[h..2 * h].iter_mut().for_each(|x| *x = T::one());
            store.insert("lstm.b", Tensor::from_vec(&[4 * h], b).expect("shape"));
            dense(store, rng, "lstm.cls.w", "lstm.cls.b", h, cfg.n_classes);
        }
        SummaryKind::Save => {
            dense(store, rng, "save.fc.w", "save.fc.b", d, cfg.save_hidden);
            dense(store, rng, "save.cls.w", "save.cls.b", cfg.save_hidden, cfg.n_classes);
        }
    }
}

/// Fresh parameters for the encoder, the phonetic head and the configured
/// summary head.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(cfg, &mut store, &mut rng);
    init_phone_head(cfg, &mut store, &mut rng);
    init_summary_head(cfg, cfg.summary_kind, &mut store, &mut rng);
    Ok(store)
}

/// Checks that `store` has exactly the shapes `cfg` implies for the encoder
/// and the phonetic head, reporting the first disagreement.
pub fn check_compatible<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let expected: ParamStore<T> = init_params(cfg, 0)?;
    for (name, t) in expected.iter() {
        if name.starts_with("stcn.") || name.starts_with("lstm.") || name.starts_with("save.") {
            continue;
        }
        let got = store.get(name).map_err(|_| {
            FtmError::Config(format!(
                "checkpoint lacks {name}; config expects n_layers={} d_model={}",
                cfg.n_layers, cfg.d_model
            ))
        })?;
        if got.shape() != t.shape() {
            return Err(FtmError::Config(format!(
                "{name}: checkpoint shape {:?} vs config shape {:?} (config n_layers={} d_model={})",
                got.shape(),
                t.shape(),
                cfg.n_layers,
                cfg.d_model
            )));
        }
    }
    let extra_layer = format!("enc.{}.attn.wq", cfg.n_layers);
    if store.contains(&extra_layer) {
        return Err(FtmError::Config(format!(
            "checkpoint has more encoder layers than the configured n_layers={}",
            cfg.n_layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ModelConfig::desk();
        let a: ParamStore<f32> = init_params(&cfg, 7).unwrap();
        let b: ParamStore<f32> = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("enc.1.ff.w2"));
        assert!(a.contains("stcn.0.conv2.v"));
        assert!(!a.contains("save.fc.w"));
        check_compatible(&cfg, &a).unwrap();
    }

    #[test]
    fn mismatch_names_both_sides() {
        let cfg = ModelConfig::desk();
        let store: ParamStore<f32> = init_params(&cfg, 1).unwrap();
        let wider = ModelConfig { d_model: 128, tcn_channels: 128, ..cfg.clone() };
        let msg = check_compatible(&wider, &store).unwrap_err().to_string();
        assert!(msg.contains("d_model=128") && msg.contains("checkpoint shape"), "{msg}");
        let deeper = ModelConfig { n_layers: 3, ..cfg.clone() };
        assert!(check_compatible(&deeper, &store).is_err());
        let shallower = ModelConfig { n_layers: 1, ..cfg };
        assert!(check_compatible(&shallower, &store).is_err());
    }
}
