//! Low-rank adapters on the query and value projections.
//!
//! Each adapter holds `A: r×d` and `B: d×r` and contributes `(α/r)·B·A·x`
//! beside the frozen projection `W₀·x`. `A` starts Gaussian and `B` starts at
//! zero, so a freshly attached set leaves every logit unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self as container, CheckpointError, ADAPTER_MAGIC};
use crate::model::{ModelError, Result, TransformerWeights, INIT_STD};
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

impl FromStr for Projection {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "query" | "wq" => Ok(Projection::Query),
            "v" | "value" | "wv" => Ok(Projection::Value),
            other => Err(ModelError::Contract(format!(
                "unknown adapter target {other:?} (expected query or value)"
            ))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Query => "query",
            Projection::Value => "value",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<Projection>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            targets: vec![Projection::Query, Projection::Value],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > model_dim {
            return Err(ModelError::Contract(format!(
                "LoRA rank must be in 1..={model_dim}, got {}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Contract(format!("LoRA alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Contract(format!(
                "LoRA dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(ModelError::Contract("no LoRA targets given".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `r × d`
    pub a: Tensor,
    /// `d × r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl LoraAdapter {
    /// The exact factor applied to `B·A·x`.
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn model_dim(&self) -> usize {
        self.a.shape()[1]
    }

    /// Records `(α/r)·B(A·x)` on the tape for row-major `x: t×d`. With an
    /// RNG, dropout is applied to `x` first (training only).
    pub fn delta_on_tape(
        &self,
        tape: &mut Tape,
        (a, b): (Var, Var),
        x: Var,
        rng: Option<&mut (dyn rand::RngCore + '_)>,
    ) -> Result<Var> {
        let x = match rng {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng)?,
            _ => x,
        };
        let down = tape.matmul_nt(x, a)?;
        let up = tape.matmul_nt(down, b)?;
        Ok(tape.scale(up, self.scale())?)
    }

    /// `B·A`, the dense `d × d` update before scaling.
    pub fn dense_update(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?)
    }
}

/// `(α/r)·B(A·x)` for `x: t×d`, evaluation mode.
pub fn adapter_delta(adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let d = adapter.model_dim();
    if x.rank() != 2 || x.cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "adapter_delta",
            left: x.shape().to_vec(),
            right: adapter.a.shape().to_vec(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let out = adapter.delta_on_tape(&mut tape, (a, b), xv, None)?;
    Ok(tape.value(out).clone())
}

/// One adapter per (layer, target), ordered by layer then projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
    num_layers: usize,
    model_dim: usize,
}

/// Adapter factors registered on a tape, in set order.
#[derive(Debug, Clone)]
pub struct BoundAdapters {
    pairs: Vec<(Var, Var)>,
}

impl BoundAdapters {
    pub fn pair(&self, idx: usize) -> (Var, Var) {
        self.pairs[idx]
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.pairs.iter().flat_map(|&(a, b)| [a, b])
    }

    pub fn accumulate(&self, grads: &Gradients, set: &mut AdapterSet) -> Result<()> {
        for (&(a, b), adapter) in self.pairs.iter().zip(&mut set.adapters) {
            grads.accumulate_into(a, &mut adapter.a)?;
            grads.accumulate_into(b, &mut adapter.b)?;
        }
        Ok(())
    }
}

impl AdapterSet {
    pub fn empty(weights: &TransformerWeights) -> Self {
        Self {
            adapters: Vec::new(),
            num_layers: weights.config.num_layers,
            model_dim: weights.config.model_dim,
        }
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn index_of(&self, layer: usize, projection: Projection) -> Option<usize> {
        self.adapters
            .iter()
            .position(|a| a.target.layer == layer && a.target.projection == projection)
    }

    pub fn check_compatible(&self, weights: &TransformerWeights) -> Result<()> {
        let c = &weights.config;
        if self.num_layers != c.num_layers || self.model_dim != c.model_dim {
            return Err(ModelError::AdapterMismatch(format!(
                "adapters built for {} layers × width {}, model has {} × {}",
                self.num_layers, self.model_dim, c.num_layers, c.model_dim
            )));
        }
        for a in &self.adapters {
            let d = c.model_dim;
            if a.target.layer >= c.num_layers
                || a.a.shape() != [a.rank, d]
                || a.b.shape() != [d, a.rank]
            {
                return Err(ModelError::AdapterMismatch(format!(
                    "adapter {:?} has A {:?}, B {:?} for width {d}",
                    a.target,
                    a.a.shape(),
                    a.b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapters {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundAdapters {
            pairs: self.adapters.iter().map(|a| (leaf(&a.a), leaf(&a.b))).collect(),
        }
    }

    /// Canonical `(name, tensor)` list used for serialization.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.adapters
            .iter()
            .flat_map(|a| {
                let prefix = format!("layers.{}.{}", a.target.layer, a.target.projection);
                [(format!("{prefix}.A"), &a.a), (format!("{prefix}.B"), &a.b)]
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        trainable_parameters(self).into_iter().for_each(Tensor::zero_grad);
    }
}

/// Creates one adapter per (layer, target) with `A ~ N(0, 0.02²)`, `B = 0`.
/// The base weights are untouched and never handed to an optimizer.
pub fn attach_adapters(weights: &TransformerWeights, config: &LoraConfig) -> Result<AdapterSet> {
    let d = weights.config.model_dim;
    config.validate(d)?;
    let mut targets = config.targets.clone();
    targets.sort();
    targets.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adapters = Vec::new();
    for layer in 0..weights.config.num_layers {
        for &projection in &targets {
            adapters.push(LoraAdapter {
                target: AdapterTarget { layer, projection },
                a: Tensor::randn(&[config.rank, d], INIT_STD, &mut rng),
                b: Tensor::zeros(&[d, config.rank]),
                rank: config.rank,
                alpha: config.alpha,
                dropout: config.dropout,
            });
        }
    }
    Ok(AdapterSet {
        adapters,
        num_layers: weights.config.num_layers,
        model_dim: d,
    })
}

/// Exactly the adapter factors (A and B of every adapter), in set order.
pub fn trainable_parameters(set: &mut AdapterSet) -> Vec<&mut Tensor> {
    set.adapters
        .iter_mut()
        .flat_map(|a| [&mut a.a, &mut a.b])
        .collect()
}

pub fn num_trainable_parameters(set: &AdapterSet) -> usize {
    set.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
}

/// Folds every adapter into its projection: `W = W₀ + (α/r)·B·A`.
pub fn merge(weights: &TransformerWeights, set: &AdapterSet) -> Result<TransformerWeights> {
    set.check_compatible(weights)?;
    let mut merged = weights.clone();
    for a in &set.adapters {
        let update = a.dense_update()?;
        let scale = a.scale();
        let w = merged.layers[a.target.layer].projection_mut(a.target.projection);
        for (w, u) in w.data_mut().iter_mut().zip(update.data()) {
            *w += scale * u;
        }
    }
    Ok(merged)
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    num_layers: usize,
    model_dim: usize,
    adapters: Vec<AdapterMeta>,
    #[serde(default)]
    extras: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    layer: usize,
    projection: Projection,
    rank: usize,
    alpha: f32,
    dropout: f32,
}

/// Serializes adapters (plus optional extra named tensors such as a
/// classifier head) in the `FTLA` container layout.
pub fn adapters_to_bytes(set: &AdapterSet, extras: &[(String, &Tensor)]) -> Vec<u8> {
    let header = AdapterHeader {
        num_layers: set.num_layers,
        model_dim: set.model_dim,
        adapters: set
            .adapters
            .iter()
            .map(|a| AdapterMeta {
                layer: a.target.layer,
                projection: a.target.projection,
                rank: a.rank,
                alpha: a.alpha,
                dropout: a.dropout,
            })
            .collect(),
        extras: extras.iter().map(|(n, _)| n.clone()).collect(),
    };
    let mut params = set.named_params();
    params.extend(extras.iter().map(|(n, t)| (n.clone(), *t)));
    container::encode(
        ADAPTER_MAGIC,
        &serde_json::to_string(&header).expect("header serializes"),
        &params,
    )
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<(AdapterSet, Vec<(String, Tensor)>)> {
    let c = container::decode(bytes, ADAPTER_MAGIC)?;
    let header: AdapterHeader =
        serde_json::from_str(&c.config_json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let d = header.model_dim;
    let mut expected = Vec::new();
    for m in &header.adapters {
        if m.rank == 0 || m.rank > d || m.layer >= header.num_layers {
            return Err(CheckpointError::Config(format!("invalid adapter entry {m:?}")).into());
        }
        let prefix = format!("layers.{}.{}", m.layer, m.projection);
        expected.push((format!("{prefix}.A"), vec![m.rank, d]));
        expected.push((format!("{prefix}.B"), vec![d, m.rank]));
    }
    let n_adapter_params = expected.len();
    if c.params.len() != n_adapter_params + header.extras.len() {
        return Err(CheckpointError::ParamNames {
            expected: expected.iter().map(|(n, _)| n.clone()).chain(header.extras.clone()).collect(),
            found: c.params.iter().map(|(n, _)| n.clone()).collect(),
        }
        .into());
    }
    container::expect_layout(&c.params[..n_adapter_params], &expected)?;
    let mut params = c.params.into_iter();
    let mut adapters = Vec::with_capacity(header.adapters.len());
    for m in header.adapters {
        let (_, a) = params.next().expect("layout checked");
        let (_, b) = params.next().expect("layout checked");
        adapters.push(LoraAdapter {
            target: AdapterTarget {
                layer: m.layer,
                projection: m.projection,
            },
            a,
            b,
            rank: m.rank,
            alpha: m.alpha,
            dropout: m.dropout,
        });
    }
    let extras: Vec<(String, Tensor)> = params.collect();
    if extras.iter().map(|(n, _)| n).ne(header.extras.iter()) {
        return Err(CheckpointError::Config("extra tensor names do not match header".into()).into());
    }
    Ok((
        AdapterSet {
            adapters,
            num_layers: header.num_layers,
            model_dim: d,
        },
        extras,
    ))
}

pub fn save_adapters(set: &AdapterSet, extras: &[(String, &Tensor)], path: &Path) -> Result<()> {
    Ok(container::write_file(path, &adapters_to_bytes(set, extras))?)
}

pub fn load_adapters(path: &Path) -> Result<(AdapterSet, Vec<(String, Tensor)>)> {
    adapters_from_bytes(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, TransformerConfig};
    use rand::Rng;

    fn desk() -> TransformerWeights {
        init_model(&TransformerConfig::default()).unwrap()
    }

    #[test]
    fn counts_for_desk_model() {
        let w = desk();
        let mut set = attach_adapters(&w, &LoraConfig::default()).unwrap();
        assert_eq!(set.len(), 4);
        assert!(set.adapters().iter().all(|a| a.a.len() + a.b.len() == 512));
        assert_eq!(num_trainable_parameters(&set), 2048);
        let total: usize = trainable_parameters(&mut set).iter().map(|t| t.len()).sum();
        assert_eq!(total, 2048);
        assert!(set.adapters().iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn contract_errors() {
        let w = desk();
        let too_big = LoraConfig {
            rank: 65,
            ..Default::default()
        };
        assert!(attach_adapters(&w, &too_big).is_err());
        assert!("key".parse::<Projection>().is_err());
        assert_eq!("Q".parse::<Projection>().unwrap(), Projection::Query);
    }

    #[test]
    fn empty_set_has_no_parameters() {
        let mut set = AdapterSet::empty(&desk());
        assert!(trainable_parameters(&mut set).is_empty());
    }

    #[test]
    fn delta_zero_when_b_zero() {
        let w = desk();
        let set = attach_adapters(&w, &LoraConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 64], 1.0, &mut rng);
        let out = adapter_delta(&set.adapters()[0], &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(adapter_delta(&set.adapters()[0], &Tensor::zeros(&[3, 63])).is_err());
    }

    #[test]
    fn rank_one_hand_example() {
        let d = 3;
        let mut a = Tensor::zeros(&[1, d]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(&[d, 1]);
        b.data_mut()[0] = 1.0;
        let adapter = LoraAdapter {
            target: AdapterTarget {
                layer: 0,
                projection: Projection::Query,
            },
            a,
            b,
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
        };
        let x = Tensor::from_rows(&[&[2.5, -1.0, 4.0]]);
        assert_eq!(adapter_delta(&adapter, &x).unwrap().data(), &[2.5, 0.0, 0.0]);
    }

    #[test]
    fn low_rank_path_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, r) = (16, 3);
        let adapter = LoraAdapter {
            target: AdapterTarget {
                layer: 0,
                projection: Projection::Value,
            },
            a: Tensor::randn(&[r, d], 0.5, &mut rng),
            b: Tensor::randn(&[d, r], 0.5, &mut rng),
            rank: r,
            alpha: 8.0,
            dropout: 0.0,
        };
        let x = Tensor::randn(&[5, d], 1.0, &mut rng);
        let fast = adapter_delta(&adapter, &x).unwrap();
        // Dense oracle: x · (BA)ᵀ · α/r, accumulated in f64.
        let ba = adapter.dense_update().unwrap();
        for i in 0..5 {
            for o in 0..d {
                let mut s = 0.0f64;
                for c in 0..d {
                    s += x.row(i)[c] as f64 * ba.row(o)[c] as f64;
                }
                let want = s * adapter.scale() as f64;
                assert!((fast.row(i)[o] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn merge_of_zero_adapters_is_identity() {
        let w = desk();
        let set = attach_adapters(&w, &LoraConfig::default()).unwrap();
        let merged = merge(&w, &set).unwrap();
        assert_eq!(
            crate::model::weights_to_bytes(&merged),
            crate::model::weights_to_bytes(&w)
        );
    }

    #[test]
    fn adapter_file_round_trip_with_extras() {
        let w = desk();
        let mut set = attach_adapters(&w, &LoraConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in trainable_parameters(&mut set) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f32>() - 0.5);
        }
        let head = Tensor::from_rows(&[&[0.25; 64]]);
        let bytes = adapters_to_bytes(&set, &[("head.weight".into(), &head)]);
        assert_eq!(&bytes[..4], b"FTLA");
        let (back, extras) = adapters_from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(extras, vec![("head.weight".to_string(), head)]);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(adapters_from_bytes(&bad).is_err());
        assert!(crate::model::weights_from_bytes(&bytes).is_err());
    }
}
