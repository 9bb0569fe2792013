use std::path::Path;

use super::{Result, TransformerConfig, TransformerWeights};
use crate::checkpoint::{self as container, CheckpointError, MODEL_MAGIC};
use crate::model::LayerWeights;

/// Serializes config and weights in the `FTLM` container layout.
pub fn weights_to_bytes(weights: &TransformerWeights) -> Vec<u8> {
    let config = serde_json::to_string(&weights.config).expect("config serializes");
    container::encode(MODEL_MAGIC, &config, &weights.named_params())
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<TransformerWeights> {
    let c = container::decode(bytes, MODEL_MAGIC)?;
    let config: TransformerConfig =
        serde_json::from_str(&c.config_json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let template = expected_layout(&config);
    container::expect_layout(&c.params, &template)?;

    let mut it = c.params.into_iter().map(|(_, t)| t);
    let mut next = || it.next().expect("layout checked");
    let token_embedding = next();
    let position_embedding = next();
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            mlp_in_w: next(),
            mlp_in_b: next(),
            mlp_out_w: next(),
            mlp_out_b: next(),
        })
        .collect();
    let final_gain = next();
    let final_bias = next();
    Ok(TransformerWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_gain,
        final_bias,
    })
}

fn expected_layout(config: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let (v, c, d, h) = (
        config.vocab_size,
        config.context_length,
        config.model_dim,
        config.mlp_hidden,
    );
    let layer = |l: usize| {
        [
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp.in.weight", vec![h, d]),
            ("mlp.in.bias", vec![h]),
            ("mlp.out.weight", vec![d, h]),
            ("mlp.out.bias", vec![d]),
        ]
        .into_iter()
        .map(move |(n, s)| (format!("layers.{l}.{n}"), s))
    };
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
    for l in 0..config.num_layers {
        out.extend(layer(l));
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out
}

pub fn save_checkpoint(weights: &TransformerWeights, path: &Path) -> Result<()> {
    Ok(container::write_file(path, &weights_to_bytes(weights))?)
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerWeights> {
    weights_from_bytes(&container::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelError};
    use crate::tensor::Tensor;

    fn layout_matches(weights: &TransformerWeights) -> bool {
        let names: Vec<(String, Vec<usize>)> = weights
            .named_params()
            .into_iter()
            .map(|(n, t): (String, &Tensor)| (n, t.shape().to_vec()))
            .collect();
        names == expected_layout(&weights.config)
    }

    fn tiny() -> TransformerWeights {
        init_model(&TransformerConfig {
            vocab_size: 12,
            context_length: 4,
            model_dim: 4,
            num_layers: 1,
            num_heads: 2,
            mlp_hidden: 8,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn layout_matches_named_params() {
        assert!(layout_matches(&tiny()));
        assert!(layout_matches(&init_model(&TransformerConfig::default()).unwrap()));
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let w = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ftlm");
        save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(weights_to_bytes(&back), weights_to_bytes(&w));
        assert_eq!(back, w);
    }

    #[test]
    fn single_byte_corruption_never_loads() {
        let bytes = weights_to_bytes(&tiny());
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x5a;
            assert!(weights_from_bytes(&bad).is_err(), "offset {i}");
        }
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = weights_to_bytes(&tiny());
        bytes[4] = 2;
        assert!(matches!(
            weights_from_bytes(&bytes),
            Err(ModelError::Checkpoint(CheckpointError::UnsupportedVersion { found: 2, .. }))
        ));
    }

    #[test]
    fn wrong_shape_for_config() {
        let w = tiny();
        let mut config = w.config.clone();
        config.mlp_hidden = 6;
        let json = serde_json::to_string(&config).unwrap();
        let bytes = container::encode(MODEL_MAGIC, &json, &w.named_params());
        assert!(matches!(
            weights_from_bytes(&bytes),
            Err(ModelError::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }
}
