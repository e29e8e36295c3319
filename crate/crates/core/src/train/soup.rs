use super::TrainError;
use crate::models::Checkpoint;

/// Elementwise mean of every array (running statistics included), accumulated
/// in f64. Metadata comes from the first checkpoint, with the constituents
/// listed and the validation accuracy set to their mean.
pub fn model_soup(checkpoints: &[Checkpoint]) -> Result<Checkpoint, TrainError> {
    let first = checkpoints
        .first()
        .ok_or_else(|| TrainError::Input("model soup needs at least one checkpoint".into()))?;
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        if c.meta.arch != first.meta.arch || c.meta.spec_name != first.meta.spec_name {
            return Err(TrainError::Incompatible(format!(
                "checkpoint {k} is `{}`, expected `{}`",
                c.meta.spec_name, first.meta.spec_name
            )));
        }
        if c.tensors.len() != first.tensors.len() {
            return Err(TrainError::Incompatible(format!(
                "checkpoint {k} has {} arrays, expected {}",
                c.tensors.len(),
                first.tensors.len()
            )));
        }
        for ((n, s, _), (n0, s0, _)) in c.tensors.iter().zip(&first.tensors) {
            if n != n0 || s != s0 {
                return Err(TrainError::Incompatible(format!(
                    "checkpoint {k} array `{n}` {s:?} vs `{n0}` {s0:?}"
                )));
            }
        }
    }
    let k = checkpoints.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(ti, (name, shape, vals))| {
            let mut acc = vec![0.0f64; vals.len()];
            for c in checkpoints {
                for (a, v) in acc.iter_mut().zip(&c.tensors[ti].2) {
                    *a += *v as f64;
                }
            }
            (name.clone(), shape.clone(), acc.into_iter().map(|a| (a / k) as f32).collect())
        })
        .collect();
    let mut meta = first.meta.clone();
    meta.epoch = checkpoints.iter().map(|c| c.meta.epoch).max().unwrap_or(0);
    meta.val_accuracy = checkpoints.iter().map(|c| c.meta.val_accuracy).sum::<f64>() / k;
    meta.constituents = checkpoints
        .iter()
        .map(|c| format!("{}@epoch{}", c.meta.spec_name, c.meta.epoch))
        .collect();
    Ok(Checkpoint { meta, tensors })
}
