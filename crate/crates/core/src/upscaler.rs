//! Depth up-scaling: builds a deeper model by stacking copies of existing
//! layers, leaving embeddings and the final norm untouched. The copied
//! weights are bit-exact; recovering quality is continued training's job.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};
use crate::model::checkpoint::{layer_names, Checkpoint};
use crate::tensor::Tensor;

/// Which source layer each output layer copies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DusPlan {
    pub map: Vec<usize>,
    pub source_config_digest: String,
}

impl DusPlan {
    pub fn check_against_layers(&self, n_source: usize) -> Result<()> {
        if self.map.len() < n_source {
            return Err(KanacError::validation(format!(
                "plan of length {} would shrink a {n_source}-layer model",
                self.map.len()
            )));
        }
        for &src in &self.map {
            if src >= n_source {
                return Err(KanacError::validation(format!(
                    "plan copies layer {src} but the source has only {n_source} layers"
                )));
            }
        }
        Ok(())
    }
}

/// Default overlap scheme: the first ⌈n_target/2⌉ output layers copy the
/// head of the source, the last ⌊n_target/2⌋ copy its tail.
pub fn dus_map(n_source: usize, n_target: usize) -> Result<Vec<usize>> {
    if n_source == 0 {
        return Err(KanacError::validation("source must have at least 1 layer"));
    }
    if n_target < n_source || n_target > 2 * n_source {
        return Err(KanacError::validation(format!(
            "target depth {n_target} must lie in [{n_source}, {}]",
            2 * n_source
        )));
    }
    let front = n_target.div_ceil(2);
    let back = n_target / 2;
    let mut map: Vec<usize> = (0..front).collect();
    map.extend(n_source - back..n_source);
    Ok(map)
}

/// Builds the deeper checkpoint described by the plan.
pub fn apply_dus(ckpt: &Checkpoint, plan: &DusPlan) -> Result<Checkpoint> {
    if plan.source_config_digest != ckpt.config.digest() {
        return Err(KanacError::validation(
            "plan was produced for a different model configuration",
        ));
    }
    plan.check_against_layers(ckpt.config.n_layers)?;

    let mut config = ckpt.config.clone();
    config.n_layers = plan.map.len();
    let mut tensors: BTreeMap<String, Tensor> = ckpt
        .tensors
        .iter()
        .filter(|(name, _)| !name.starts_with("layer."))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect();
    for (dst, &src) in plan.map.iter().enumerate() {
        let from = layer_names(src);
        let to = layer_names(dst);
        let pairs = [
            (&from.attn_norm, &to.attn_norm),
            (&from.wq, &to.wq),
            (&from.wk, &to.wk),
            (&from.wv, &to.wv),
            (&from.wo, &to.wo),
            (&from.ffn_norm, &to.ffn_norm),
            (&from.gate, &to.gate),
            (&from.up, &to.up),
            (&from.down, &to.down),
        ];
        for (src_name, dst_name) in pairs {
            tensors.insert(dst_name.clone(), ckpt.tensor(src_name)?.clone());
        }
    }

    let mut metadata = ckpt.metadata.clone();
    metadata.insert("upscaled_from".to_string(), ckpt.digest());
    metadata.insert(
        "dus_map".to_string(),
        serde_json::to_string(&plan.map)?,
    );
    let out = Checkpoint {
        config,
        tensors,
        metadata,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_checkpoint;

    #[test]
    fn overlap_map_examples() {
        assert_eq!(dus_map(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(dus_map(4, 6).unwrap(), vec![0, 1, 2, 1, 2, 3]);
        let mut want: Vec<usize> = (0..24).collect();
        want.extend(8..32);
        assert_eq!(dus_map(32, 48).unwrap(), want);
    }

    #[test]
    fn rejects_out_of_range_targets() {
        assert!(matches!(dus_map(4, 3), Err(KanacError::Validation(_))));
        assert!(matches!(dus_map(4, 9), Err(KanacError::Validation(_))));
    }

    #[test]
    fn identity_plan_preserves_the_checkpoint() {
        let ckpt = tiny_checkpoint(3, 31);
        let plan = DusPlan {
            map: dus_map(3, 3).unwrap(),
            source_config_digest: ckpt.config.digest(),
        };
        let up = apply_dus(&ckpt, &plan).unwrap();
        assert_eq!(up.config, ckpt.config);
        assert_eq!(up.tensors, ckpt.tensors);
    }

    #[test]
    fn output_layers_copy_their_sources_bit_exactly() {
        let ckpt = tiny_checkpoint(2, 32);
        let plan = DusPlan {
            map: dus_map(2, 3).unwrap(),
            source_config_digest: ckpt.config.digest(),
        };
        let up = apply_dus(&ckpt, &plan).unwrap();
        assert_eq!(up.config.n_layers, 3);
        assert_eq!(plan.map, vec![0, 1, 1]);
        for (dst, &src) in plan.map.iter().enumerate() {
            let from = layer_names(src);
            let to = layer_names(dst);
            assert_eq!(up.tensor(&to.wq).unwrap(), ckpt.tensor(&from.wq).unwrap());
            assert_eq!(
                up.tensor(&to.down).unwrap(),
                ckpt.tensor(&from.down).unwrap()
            );
        }
        let count: usize = up.tensors.values().map(|t| t.data.len()).sum();
        assert_eq!(count, up.config.param_count());

        let kept = [0usize, 1];
        for (back, &src) in kept.iter().enumerate() {
            let to = layer_names(back);
            let from = layer_names(src);
            assert_eq!(up.tensor(&to.gate).unwrap(), ckpt.tensor(&from.gate).unwrap());
        }
    }

    #[test]
    fn rejects_shrinking_plans_and_foreign_digests() {
        let ckpt = tiny_checkpoint(3, 33);
        let shrink = DusPlan {
            map: vec![0, 1],
            source_config_digest: ckpt.config.digest(),
        };
        assert!(matches!(
            apply_dus(&ckpt, &shrink),
            Err(KanacError::Validation(_))
        ));
        let foreign = DusPlan {
            map: vec![0, 1, 2],
            source_config_digest: "deadbeef".to_string(),
        };
        assert!(matches!(
            apply_dus(&ckpt, &foreign),
            Err(KanacError::Validation(_))
        ));
    }
}
