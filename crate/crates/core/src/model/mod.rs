//! The forecasting network: per-district temporal transformer over projected
//! window features with learned slice-position embeddings, a cross-district
//! spatial transformer with relative-coordinate embeddings, a key-value
//! memory read driven by sensitive-feature embeddings, and an MLP head.
//!
//! Parameters are immutable during inference, so concurrent read-only
//! prediction is safe; training is single-writer.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward_batch, forward_trace, predict, BatchForward, ForwardTrace, Mode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::sha256_hex;
use crate::numerics::{Parameter, Tensor};

/// Names of the sensitive embedding tables, in canonical feature order.
pub const SENSITIVE_NAMES: [&str; 6] = [
    "city",
    "district",
    "minute",
    "peak",
    "day_of_week",
    "weather",
];

/// The five removable components, plus the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    WithoutTemporalPositionEmbedding,
    WithoutSpatialPositionEmbedding,
    WithoutTemporalTransformer,
    WithoutSpatialTransformer,
    WithoutMemoryNetwork,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::WithoutTemporalPositionEmbedding,
        AblationVariant::WithoutSpatialPositionEmbedding,
        AblationVariant::WithoutTemporalTransformer,
        AblationVariant::WithoutSpatialTransformer,
        AblationVariant::WithoutMemoryNetwork,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutTemporalPositionEmbedding => "w/o temporal position embedding",
            AblationVariant::WithoutSpatialPositionEmbedding => "w/o spatial position embedding",
            AblationVariant::WithoutTemporalTransformer => "w/o temporal transformer",
            AblationVariant::WithoutSpatialTransformer => "w/o spatial transformer",
            AblationVariant::WithoutMemoryNetwork => "w/o memory network",
        }
    }
}

/// Model dimensions and component switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SttmConfig {
    /// Districts per sample (center + m-1 neighbors).
    pub m: usize,
    /// Time slices per district.
    pub n: usize,
    pub d_a: usize,
    pub d_b: usize,
    pub n_x: u32,
    pub n_y: u32,
    /// Transformer hidden size H (shared by both encoders).
    pub hidden: usize,
    /// Encoder layers per transformer.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Embedding size E of each sensitive feature.
    pub embed: usize,
    /// Memory-network hidden size H'.
    pub memory_hidden: usize,
    /// Number of stored patterns L_mem.
    pub memory_patterns: usize,
    /// Pattern dimension D_mem.
    pub memory_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Vocabulary sizes of the six sensitive features (unknown row included).
    pub vocab_sizes: [usize; 6],
    pub use_tpe: bool,
    pub use_spe: bool,
    pub use_temporal_transformer: bool,
    pub use_spatial_transformer: bool,
    pub use_memory: bool,
}

impl SttmConfig {
    /// The reference configuration: H = 256, L = 1, E = 8, H' = 256,
    /// L_mem = 12, D_mem = 64, M = 10, N = 6, scale factors 10, dropout 0.1.
    /// Head count 4, FFN width 4H and MLP hidden 256 fill in the encoder
    /// internals the reference leaves open.
    pub fn table_defaults(vocab_sizes: [usize; 6]) -> Self {
        SttmConfig {
            m: 10,
            n: 6,
            d_a: crate::features::D_A,
            d_b: crate::features::D_B,
            n_x: 10,
            n_y: 10,
            hidden: 256,
            layers: 1,
            heads: 4,
            ffn_dim: 1024,
            embed: 8,
            memory_hidden: 256,
            memory_patterns: 12,
            memory_dim: 64,
            mlp_hidden: 256,
            dropout: 0.1,
            vocab_sizes,
            use_tpe: true,
            use_spe: true,
            use_temporal_transformer: true,
            use_spatial_transformer: true,
            use_memory: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| -> Result<()> {
            Err(Error::Config(format!("model.{field}: {why}")))
        };
        for (name, v) in [
            ("m", self.m),
            ("n", self.n),
            ("d_a", self.d_a),
            ("d_b", self.d_b),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("embed", self.embed),
            ("memory_hidden", self.memory_hidden),
            ("memory_patterns", self.memory_patterns),
            ("memory_dim", self.memory_dim),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.n_x == 0 || self.n_y == 0 {
            return bad("n_x", "scale factors must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(
                "heads",
                format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.d_b != SENSITIVE_NAMES.len() {
            return bad("d_b", format!("expected {}", SENSITIVE_NAMES.len()));
        }
        if self.vocab_sizes.iter().any(|&v| v == 0) {
            return bad("vocab_sizes", "must all be positive".into());
        }
        Ok(())
    }

    /// Applies one ablation to a base configuration.
    pub fn ablate(&self, variant: AblationVariant) -> Self {
        let mut cfg = self.clone();
        match variant {
            AblationVariant::Full => {}
            AblationVariant::WithoutTemporalPositionEmbedding => cfg.use_tpe = false,
            AblationVariant::WithoutSpatialPositionEmbedding => cfg.use_spe = false,
            AblationVariant::WithoutTemporalTransformer => cfg.use_temporal_transformer = false,
            AblationVariant::WithoutSpatialTransformer => cfg.use_spatial_transformer = false,
            AblationVariant::WithoutMemoryNetwork => cfg.use_memory = false,
        }
        cfg
    }

    /// Spatial position embeddings only exist where the spatial encoder can
    /// consume them.
    pub fn spe_active(&self) -> bool {
        self.use_spe && self.use_spatial_transformer
    }

    pub fn mlp_input_dim(&self) -> usize {
        if self.use_memory {
            self.hidden + 2 * self.memory_dim
        } else {
            self.hidden + self.memory_hidden
        }
    }

    /// Canonical (name, shape) list of every learnable tensor. Initialization,
    /// parameter counting, the optimizer and checkpoints all follow this
    /// order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        if self.use_tpe {
            shapes.push(("tpe".into(), vec![self.n, h]));
        }
        if self.spe_active() {
            shapes.push(("spe_x".into(), vec![2 * self.n_x as usize, h]));
            shapes.push(("spe_y".into(), vec![2 * self.n_y as usize, h]));
        }
        shapes.push(("w_xa".into(), vec![self.d_a, h]));
        let encoder = |prefix: &str, shapes: &mut Vec<(String, Vec<usize>)>| {
            for l in 0..self.layers {
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    shapes.push((format!("{prefix}.{l}.{w}"), vec![h, h]));
                }
                for b in ["b_q", "b_k", "b_v", "b_o"] {
                    shapes.push((format!("{prefix}.{l}.{b}"), vec![h]));
                }
                shapes.push((format!("{prefix}.{l}.ln1_gain"), vec![h]));
                shapes.push((format!("{prefix}.{l}.ln1_bias"), vec![h]));
                shapes.push((format!("{prefix}.{l}.w_ff1"), vec![h, self.ffn_dim]));
                shapes.push((format!("{prefix}.{l}.b_ff1"), vec![self.ffn_dim]));
                shapes.push((format!("{prefix}.{l}.w_ff2"), vec![self.ffn_dim, h]));
                shapes.push((format!("{prefix}.{l}.b_ff2"), vec![h]));
                shapes.push((format!("{prefix}.{l}.ln2_gain"), vec![h]));
                shapes.push((format!("{prefix}.{l}.ln2_bias"), vec![h]));
            }
        };
        if self.use_temporal_transformer {
            encoder("temporal", &mut shapes);
        }
        if self.use_spatial_transformer {
            encoder("spatial", &mut shapes);
        }
        for (i, name) in SENSITIVE_NAMES.iter().enumerate() {
            shapes.push((format!("embed.{name}"), vec![self.vocab_sizes[i], self.embed]));
        }
        shapes.push((
            "w_xb".into(),
            vec![self.d_b * self.embed, self.memory_hidden],
        ));
        if self.use_memory {
            shapes.push((
                "memory.w_query".into(),
                vec![h + self.memory_hidden, self.memory_dim],
            ));
            shapes.push(("memory.b_query".into(), vec![self.memory_dim]));
            shapes.push((
                "memory.w_mem".into(),
                vec![self.memory_patterns, self.memory_dim],
            ));
        }
        shapes.push(("mlp.w1".into(), vec![self.mlp_input_dim(), self.mlp_hidden]));
        shapes.push(("mlp.b1".into(), vec![self.mlp_hidden]));
        shapes.push(("mlp.w2".into(), vec![self.mlp_hidden, 1]));
        shapes.push(("mlp.b2".into(), vec![1]));
        shapes
    }

    /// Total learnable scalar count; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialize").as_bytes())
    }
}

/// All learnable weights, stored in the canonical `parameter_shapes` order.
#[derive(Clone, Debug)]
pub struct SttmParams {
    pub config: SttmConfig,
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl SttmParams {
    /// Scaled-uniform initialization with bound sqrt(6 / (fan_in + fan_out))
    /// per matrix; bias vectors start at zero and layer-norm gains at one.
    pub fn init(config: SttmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                if name.ends_with("_gain") {
                    vec![1.0; numel]
                } else {
                    vec![0.0; numel]
                }
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..numel)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            names.push(name);
            params.push(Parameter::new(Tensor::new(shape, data)?));
        }
        Ok(SttmParams {
            config,
            names,
            params,
        })
    }

    pub fn get(&self, name: &str) -> &Parameter {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.params[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut())
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.params.iter().map(Parameter::numel).collect()
    }

    /// Hash of the configuration and every parameter value; identifies a
    /// trained model exactly.
    pub fn fingerprint(&self) -> String {
        let mut parts: Vec<(&str, Vec<u8>)> = vec![(
            "config",
            serde_json::to_vec(&self.config).expect("config serialize"),
        )];
        for (name, p) in self.iter() {
            let mut bytes = Vec::with_capacity(p.tensor.data.len() * 8);
            for v in &p.tensor.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            parts.push((name, bytes));
        }
        let borrowed: Vec<(&str, &[u8])> =
            parts.iter().map(|(n, b)| (*n, b.as_slice())).collect();
        crate::fingerprint::combined_fingerprint(&borrowed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_vocab() -> [usize; 6] {
        [2, 31, 1441, 6, 8, 4]
    }

    #[test]
    fn param_count_at_table_defaults_is_frozen() {
        let cfg = SttmConfig::table_defaults(test_vocab());
        // closed form, computed once from the shape list and frozen:
        //   tpe 6*256 + spe 2*(20*256) + w_xa 31*256              =    19_712
        // + 2 encoders * (4*256^2 + 4*256 + 2*256 + 256*1024
        //                 + 1024 + 1024*256 + 256 + 2*256)        = 1_579_520
        // + embeddings (2+31+1441+6+8+4)*8                        =    11_936
        // + w_xb 48*256                                           =    12_288
        // + memory (512*64 + 64 + 12*64)                          =    33_600
        // + mlp (384*256 + 256 + 256 + 1)                         =    98_817
        assert_eq!(cfg.param_count(), 1_755_873);
        let params = SttmParams::init(cfg, 0).unwrap();
        assert_eq!(params.param_count(), 1_755_873);
    }

    #[test]
    fn every_ablation_strictly_reduces_parameter_count() {
        let cfg = SttmConfig::table_defaults(test_vocab());
        let full = cfg.param_count();
        for variant in AblationVariant::ALL.into_iter().skip(1) {
            let reduced = cfg.ablate(variant).param_count();
            assert!(
                reduced < full,
                "{}: {reduced} not below full {full}",
                variant.name()
            );
        }
    }

    #[test]
    fn same_seed_same_init_different_seed_differs() {
        let cfg = SttmConfig::table_defaults(test_vocab());
        let a = SttmParams::init(cfg.clone(), 7).unwrap();
        let b = SttmParams::init(cfg.clone(), 7).unwrap();
        let c = SttmParams::init(cfg, 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn distinct_slice_embeddings_after_init() {
        let cfg = SttmConfig::table_defaults(test_vocab());
        let params = SttmParams::init(cfg, 3).unwrap();
        let tpe = params.get("tpe");
        let h = 256;
        for a in 0..6 {
            for b in (a + 1)..6 {
                assert_ne!(
                    tpe.tensor.data[a * h..(a + 1) * h],
                    tpe.tensor.data[b * h..(b + 1) * h]
                );
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SttmConfig::table_defaults(test_vocab());
        cfg.heads = 3; // 256 % 3 != 0
        assert!(cfg.validate().is_err());
    }
}
